"""K-means codebook over frame features; features <-> discrete audio tokens.

Features are clustered as-is (no normalization). Nearest-centroid ties always
resolve to the lowest index, which makes tokenize(detokenize(s)) the identity
on any valid token sequence.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .audio import FrameFeatureSequence
from .hashing import content_hash

CODEBOOK_MAGIC = b"TFC1"
DEFAULT_CODEBOOK_SIZE = 1024
DEFAULT_MAX_ITERS = 100
DEFAULT_TOL = 1e-6


@dataclass
class Codebook:
    centroids: np.ndarray
    train_distortion: float = 0.0
    seed: int = 0
    version: int = 1

    def __post_init__(self):
        self.centroids = np.ascontiguousarray(self.centroids, dtype=np.float32)
        if self.centroids.ndim != 2 or self.k < 2:
            raise ValueError("codebook needs a K x D matrix with K >= 2")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("codebook contains non-finite centroids")
        c = self.centroids.astype(np.float64)
        sq = np.sum(c * c, axis=1)
        d2 = sq[:, None] - 2.0 * (c @ c.T) + sq[None, :]
        np.fill_diagonal(d2, np.inf)
        if np.min(d2) <= (1e-12) ** 2:
            raise ValueError("codebook centroids are not pairwise distinct")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    @property
    def codebook_id(self) -> str:
        return content_hash("codebook", self.k, self.dim, self.centroids)


@dataclass
class AudioTokenSeq:
    tokens: np.ndarray
    token_rate: float = 25.0
    codebook_id: str = ""

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1)
        if self.token_rate <= 0:
            raise ValueError("token_rate must be positive")
        if len(self.tokens) and self.tokens.min() < 0:
            raise ValueError("negative token id")

    def __len__(self):
        return len(self.tokens)


def _as_matrix(features) -> np.ndarray:
    if isinstance(features, FrameFeatureSequence):
        features = features.frames
    x = np.asarray(features, dtype=np.float64)
    return np.atleast_2d(x)


def _assign(x: np.ndarray, centroids: np.ndarray):
    """Exact nearest-centroid assignment with lowest-index tie-break.

    The fast ||x||^2 - 2xc + ||c||^2 expansion only shortlists candidates;
    near-minimal candidates are re-scored with the exact squared distance so
    that a frame equal to a centroid scores exactly 0 and ties resolve by
    true distance, not cancellation noise.
    """
    c = np.asarray(centroids, dtype=np.float64)
    c_sq = np.sum(c * c, axis=1)
    n = x.shape[0]
    labels = np.empty(n, dtype=np.int64)
    chunk = max(1, int(2**22 // max(1, c.shape[0])))
    for start in range(0, n, chunk):
        xb = x[start : start + chunk]
        x_sq = np.sum(xb * xb, axis=1)
        d2 = x_sq[:, None] - 2.0 * (xb @ c.T) + c_sq[None, :]
        rows = np.arange(len(xb))
        best = np.argmin(d2, axis=1)
        slack = 1e-9 * (1.0 + np.abs(d2[rows, best]) + x_sq)
        ambiguous = np.nonzero(np.sum(d2 <= (d2[rows, best] + slack)[:, None], axis=1) > 1)[0]
        for i in ambiguous:
            cand = np.nonzero(d2[i] <= d2[i, best[i]] + slack[i])[0]
            exact = np.sum((xb[i][None, :] - c[cand]) ** 2, axis=1)
            best[i] = cand[int(np.argmin(exact))]
        labels[start : start + len(xb)] = best
    dists = np.sum((x - c[labels]) ** 2, axis=1)
    return labels, dists


def _content_uniforms(row_bytes, seed: int, round_idx: int) -> np.ndarray:
    """Per-row uniforms in (0,1) derived from row content, not position."""
    out = np.empty(len(row_bytes))
    prefix = struct.pack("<qq", seed, round_idx)
    for i, rb in enumerate(row_bytes):
        h = hashlib.sha256(prefix + rb).digest()
        out[i] = (int.from_bytes(h[:8], "little") + 0.5) / 2.0**64
    return out


def _kmeanspp_init(unique_rows, counts, row_bytes, k, seed):
    """k-means++ over unique rows, keyed to row content so corpus order and
    duplication of the corpus cannot change the chosen centers."""
    chosen = []
    d2 = None
    for round_idx in range(k):
        u = _content_uniforms(row_bytes, seed, round_idx)
        if round_idx == 0:
            weights = counts.astype(np.float64)
        else:
            weights = counts * d2
        # weighted draw via max of u_i ** (1 / w_i); zero weight never wins
        with np.errstate(divide="ignore"):
            keys = np.where(weights > 0.0, np.log(u) / weights, -np.inf)
        pick = int(np.argmax(keys))
        chosen.append(pick)
        new_d2 = np.sum((unique_rows - unique_rows[pick]) ** 2, axis=1)
        d2 = new_d2 if d2 is None else np.minimum(d2, new_d2)
    return unique_rows[chosen].copy()


def train_codebook(
    corpus,
    k: int = DEFAULT_CODEBOOK_SIZE,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
    seed: int = 0,
) -> Codebook:
    """Lloyd's algorithm with content-keyed k-means++ initialization.

    ``corpus`` is an iterable of FrameFeatureSequence (or plain F x D arrays)
    sharing one feature dimension. Per-iteration distortion is checked to be
    non-increasing; empty clusters are reseeded with the farthest frame.
    """
    mats = [_as_matrix(f) for f in corpus]
    if not mats:
        raise ValueError("empty corpus")
    dims = {m.shape[1] for m in mats}
    if len(dims) != 1:
        raise ValueError(f"corpus mixes feature dims {sorted(dims)}")
    x = np.concatenate(mats, axis=0)
    if not np.all(np.isfinite(x)):
        raise ValueError("corpus contains non-finite features")
    if x.shape[0] < k:
        raise ValueError(f"need at least {k} frames to fit {k} clusters, got {x.shape[0]}")

    # Work on unique rows with multiplicities: assignments and means depend
    # only on content, making results exactly invariant to corpus order and
    # to duplicating every frame.
    unique_rows, counts = np.unique(x, axis=0, return_counts=True)
    if unique_rows.shape[0] < k:
        raise ValueError(
            f"corpus has only {unique_rows.shape[0]} distinct frames, need {k}"
        )
    counts = counts.astype(np.float64)
    total = counts.sum()
    row_bytes = [r.tobytes() for r in unique_rows]

    centroids = _kmeanspp_init(unique_rows, counts, row_bytes, k, seed)
    prev = np.inf
    distortion = np.inf
    for _ in range(max_iters):
        labels, d2 = _assign(unique_rows, centroids)
        distortion = float(np.dot(counts, d2) / total)
        if distortion > prev * (1.0 + 1e-12) + 1e-15:
            raise AssertionError(
                f"Lloyd distortion increased: {prev} -> {distortion}"
            )
        if prev < np.inf and prev - distortion < tol * max(prev, 1e-300):
            break
        prev = distortion

        weighted = unique_rows * counts[:, None]
        for c in range(k):
            members = labels == c
            if np.any(members):
                centroids[c] = weighted[members].sum(axis=0) / counts[members].sum()
            else:
                centroids[c] = unique_rows[int(np.argmax(d2))]
                d2[int(np.argmax(d2))] = 0.0

    return Codebook(centroids, train_distortion=distortion, seed=seed)


def tokenize(features, cb: Codebook) -> AudioTokenSeq:
    """Map each frame to the index of its nearest centroid (Euclidean)."""
    x = _as_matrix(features)
    if x.shape[1] != cb.dim:
        raise ValueError(f"feature dim {x.shape[1]} != codebook dim {cb.dim}")
    labels, _ = _assign(x, cb.centroids.astype(np.float64))
    rate = features.frame_rate if isinstance(features, FrameFeatureSequence) else 25.0
    return AudioTokenSeq(labels, token_rate=rate, codebook_id=cb.codebook_id)


def detokenize(tokens: AudioTokenSeq, cb: Codebook) -> FrameFeatureSequence:
    """Replace each token with its centroid vector."""
    if tokens.codebook_id and tokens.codebook_id != cb.codebook_id:
        raise ValueError(
            f"token sequence was produced by codebook {tokens.codebook_id}, "
            f"not {cb.codebook_id}"
        )
    if len(tokens) and tokens.tokens.max() >= cb.k:
        raise ValueError(f"token {int(tokens.tokens.max())} out of range for K={cb.k}")
    frames = cb.centroids.astype(np.float64)[tokens.tokens]
    return FrameFeatureSequence(frames.reshape(len(tokens), cb.dim), tokens.token_rate)


def distortion(features, cb: Codebook) -> float:
    """Mean squared Euclidean distance from each frame to its centroid."""
    x = _as_matrix(features)
    if x.shape[1] != cb.dim:
        raise ValueError(f"feature dim {x.shape[1]} != codebook dim {cb.dim}")
    _, d2 = _assign(x, cb.centroids.astype(np.float64))
    return float(np.mean(d2))


def save_codebook(path, cb: Codebook, config_hash: str = "") -> None:
    """TFC1 container: magic, u32 K, u32 D, u64 seed, f64 distortion, f32 data.

    A producing-config hash may ride in a footer after the payload; readers
    of the bare format still see a complete file.
    """
    with open(path, "wb") as f:
        f.write(CODEBOOK_MAGIC)
        f.write(struct.pack("<IIQd", cb.k, cb.dim, cb.seed & (2**64 - 1), cb.train_distortion))
        f.write(np.ascontiguousarray(cb.centroids, dtype="<f4").tobytes())
        if config_hash:
            hash_bytes = config_hash.encode("ascii")
            f.write(struct.pack("<I", len(hash_bytes)))
            f.write(hash_bytes)


def load_codebook(path) -> Codebook:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CODEBOOK_MAGIC:
        raise ValueError(f"bad magic {blob[:4]!r}, expected {CODEBOOK_MAGIC!r}")
    k, dim, seed, train_distortion = struct.unpack_from("<IIQd", blob, 4)
    offset = 4 + struct.calcsize("<IIQd")
    count = k * dim
    if offset + 4 * count > len(blob):
        raise ValueError("codebook file truncated")
    centroids = np.frombuffer(blob[offset : offset + 4 * count], dtype="<f4").reshape(k, dim)
    return Codebook(centroids, train_distortion=train_distortion, seed=seed)


def save_token_file(path, sequences) -> None:
    """Line-delimited token records: one JSON object per sequence."""
    with open(path, "w", encoding="utf-8") as f:
        for seq in sequences:
            rec = {
                "tokens": [int(t) for t in seq.tokens],
                "token_rate": seq.token_rate,
                "codebook_id": seq.codebook_id,
            }
            f.write(json.dumps(rec) + "\n")


def load_token_file(path):
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(
                AudioTokenSeq(
                    np.asarray(rec["tokens"], dtype=np.int64),
                    token_rate=rec.get("token_rate", 25.0),
                    codebook_id=rec.get("codebook_id", ""),
                )
            )
    return out
