"""Small decoder-only transformer over the joint vocabulary.

Pre-norm residual blocks, rotary positions, causal self-attention, and a tied
output head: the output projection is the transpose of the embedding matrix,
there is no second matrix. The head is evaluated separately over the text and
audio row blocks of the embedding matrix so that expanding the vocabulary
with new audio rows can never perturb the text logits of an existing model.

Everything is plain numpy; forward and backward run in whatever dtype the
checkpoint tensors carry (float32 for training, float64 for gradient checks).
"""

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import erf

CHECKPOINT_MAGIC = b"TFK1"
CHECKPOINT_VERSION = 1
LN_EPS = 1e-5
ROPE_THETA = 10000.0
NEG_INF = -1e30


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    max_len: int = 1024
    dropout: float = 0.1
    vocab_text: int = 300
    vocab_audio: int = 0  # 0 until surgery adds the audio rows
    pos_scheme: str = "rotary"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.vocab_text + self.vocab_audio < 2:
            raise ValueError("vocabulary must have at least 2 tokens")
        if self.vocab_audio < 0 or self.layers < 1 or self.max_len < 2:
            raise ValueError("invalid model config")
        if self.pos_scheme != "rotary":
            raise ValueError(f"unknown positional scheme {self.pos_scheme!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def total_vocab(self) -> int:
        return self.vocab_text + self.vocab_audio

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "max_len": self.max_len,
            "dropout": self.dropout,
            "vocab_text": self.vocab_text,
            "vocab_audio": self.vocab_audio,
            "pos_scheme": self.pos_scheme,
        }


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict
    step: int = 0

    def __post_init__(self):
        expected = tensor_shapes(self.config)
        if set(self.tensors) != set(expected):
            missing = set(expected) - set(self.tensors)
            extra = set(self.tensors) - set(expected)
            raise ValueError(f"tensor set mismatch: missing {missing}, extra {extra}")
        for name, arr in self.tensors.items():
            if tuple(arr.shape) != expected[name]:
                raise ValueError(
                    f"tensor {name} has shape {arr.shape}, expected {expected[name]}"
                )
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"tensor {name} contains non-finite values")

    @property
    def embedding(self) -> np.ndarray:
        return self.tensors["embed"]

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.step)


def tensor_shapes(cfg: ModelConfig) -> dict:
    m, f = cfg.d_model, cfg.d_ff
    shapes = {"embed": (cfg.total_vocab, m)}
    for i in range(cfg.layers):
        p = f"layers.{i}."
        shapes[p + "ln1.gain"] = (m,)
        shapes[p + "ln1.bias"] = (m,)
        shapes[p + "attn.wq"] = (m, m)
        shapes[p + "attn.wk"] = (m, m)
        shapes[p + "attn.wv"] = (m, m)
        shapes[p + "attn.wo"] = (m, m)
        shapes[p + "ln2.gain"] = (m,)
        shapes[p + "ln2.bias"] = (m,)
        shapes[p + "ffn.w1"] = (m, f)
        shapes[p + "ffn.w2"] = (f, m)
    shapes["final_ln.gain"] = (m,)
    shapes["final_ln.bias"] = (m,)
    return shapes


def init_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Checkpoint:
    """Seeded scaled-normal initialization: 1/sqrt(d_model) for the embedding,
    1/sqrt(fan_in) for projections; norm gains 1, biases 0."""
    rng = np.random.default_rng(seed)
    m, f = cfg.d_model, cfg.d_ff
    tensors = {}
    for name, shape in tensor_shapes(cfg).items():
        if name.endswith("gain"):
            tensors[name] = np.ones(shape, dtype=dtype)
        elif name.endswith("bias"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = m if not name.endswith("ffn.w2") else f
            if name == "embed":
                fan_in = m
            tensors[name] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), shape).astype(dtype)
    return Checkpoint(cfg, tensors, step=0)


def surgery(text_ckpt: Checkpoint, a: int) -> Checkpoint:
    """Grow the embedding matrix with ``a`` zero-initialized audio rows.

    Text rows and every other tensor are preserved byte for byte; because the
    output head is the embedding transposed, the new rows contribute exactly
    zero logits until trained.
    """
    if a <= 0:
        raise ValueError("audio vocabulary size must be positive")
    if text_ckpt.config.vocab_audio != 0:
        raise ValueError(
            f"checkpoint already carries {text_ckpt.config.vocab_audio} audio rows"
        )
    old = text_ckpt.tensors
    embed = np.concatenate(
        [old["embed"], np.zeros((a, old["embed"].shape[1]), dtype=old["embed"].dtype)]
    )
    tensors = {name: arr.copy() for name, arr in old.items()}
    tensors["embed"] = embed
    cfg = replace(text_ckpt.config, vocab_audio=a)
    return Checkpoint(cfg, tensors, step=text_ckpt.step)


def _rope_tables(seq_len: int, head_dim: int, dtype):
    half = head_dim // 2
    inv_freq = ROPE_THETA ** (-np.arange(half) * 2.0 / head_dim)
    angles = np.arange(seq_len)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def _rope_apply(x, cos, sin):
    # x: (B, heads, T, head_dim); rotate the two halves of each head
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)


def _rope_unapply(g, cos, sin):
    half = g.shape[-1] // 2
    g1, g2 = g[..., :half], g[..., half:]
    return np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1)


def _layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv_std
    return xhat * gain + bias, (xhat, inv_std)


def _layer_norm_backward(dy, cache, gain):
    xhat, inv_std = cache
    dgain = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    dbias = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gain
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x * _SQRT1_2))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x * _SQRT1_2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _dropout_mask(rng, shape, rate, dtype):
    return (rng.random(shape) >= rate).astype(dtype) / dtype.type(1.0 - rate)


def _split_heads(x, n_heads):
    b, t, m = x.shape
    return x.reshape(b, t, n_heads, m // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * d)


def forward_batch(ckpt: Checkpoint, ids: np.ndarray, train: bool = False,
                  seed: int = 0, need_cache: bool = False):
    """Causal forward pass over a (B, T) id batch.

    Returns (logits, hidden, cache): logits (B, T, vocab), hidden the
    final-norm output that feeds the tied head, and cache the intermediate
    activations when ``need_cache`` (for the backward pass).
    """
    cfg = ckpt.config
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    b, t_len = ids.shape
    if t_len > cfg.max_len:
        raise ValueError(f"sequence length {t_len} exceeds max_len {cfg.max_len}")
    if ids.min() < 0 or ids.max() >= cfg.total_vocab:
        raise ValueError("token id out of vocabulary range")
    p = ckpt.tensors
    dtype = p["embed"].dtype
    rng = np.random.default_rng(seed) if train and cfg.dropout > 0.0 else None

    x = p["embed"][ids]
    cos, sin = _rope_tables(t_len, cfg.head_dim, dtype)
    causal = np.triu(np.full((t_len, t_len), NEG_INF, dtype=dtype), k=1)
    scale = dtype.type(1.0 / np.sqrt(cfg.head_dim))

    cache = {"ids": ids, "layers": [], "cos": cos, "sin": sin} if need_cache else None
    for i in range(cfg.layers):
        pre = f"layers.{i}."
        lc = {}
        h, ln1_cache = _layer_norm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
        q = _split_heads(h @ p[pre + "attn.wq"], cfg.n_heads)
        k = _split_heads(h @ p[pre + "attn.wk"], cfg.n_heads)
        v = _split_heads(h @ p[pre + "attn.wv"], cfg.n_heads)
        qr = _rope_apply(q, cos, sin)
        kr = _rope_apply(k, cos, sin)
        scores = (qr @ kr.transpose(0, 1, 3, 2)) * scale + causal
        probs = _softmax(scores)
        att = _merge_heads(probs @ v)
        att_out = att @ p[pre + "attn.wo"]
        if rng is not None:
            mask = _dropout_mask(rng, att_out.shape, cfg.dropout, dtype)
            att_out = att_out * mask
            if need_cache:
                lc["attn_drop"] = mask
        x1 = x + att_out
        h2, ln2_cache = _layer_norm(x1, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
        f1 = h2 @ p[pre + "ffn.w1"]
        g = _gelu(f1)
        f2 = g @ p[pre + "ffn.w2"]
        if rng is not None:
            mask = _dropout_mask(rng, f2.shape, cfg.dropout, dtype)
            f2 = f2 * mask
            if need_cache:
                lc["ffn_drop"] = mask
        x2 = x1 + f2
        if need_cache:
            lc.update(
                x_in=x, h=h, ln1=ln1_cache, qr=qr, kr=kr, v=v, probs=probs,
                att=att, x1=x1, h2=h2, ln2=ln2_cache, f1=f1, g=g,
            )
            cache["layers"].append(lc)
        x = x2

    hidden, final_cache = _layer_norm(x, p["final_ln.gain"], p["final_ln.bias"])
    if need_cache:
        cache["final_ln"] = final_cache
        cache["hidden"] = hidden

    tsz = cfg.vocab_text
    flat = hidden.reshape(b * t_len, cfg.d_model)
    logits = np.empty((b * t_len, cfg.total_vocab), dtype=dtype)
    logits[:, :tsz] = flat @ p["embed"][:tsz].T
    if cfg.vocab_audio:
        logits[:, tsz:] = flat @ p["embed"][tsz:].T
    return logits.reshape(b, t_len, cfg.total_vocab), hidden, cache


def backward_batch(ckpt: Checkpoint, cache: dict, dhidden: np.ndarray,
                   dlogits_fn=None) -> dict:
    """Backpropagate through the cached forward pass.

    ``dhidden`` is the gradient already accumulated on the final-norm output
    (typically from the tied head; the head's embedding gradient must be
    added by the caller, see ``training.loss_and_grads``).
    """
    cfg = ckpt.config
    p = ckpt.tensors
    grads = {name: np.zeros_like(arr) for name, arr in p.items()}
    cos, sin = cache["cos"], cache["sin"]
    scale = p["embed"].dtype.type(1.0 / np.sqrt(cfg.head_dim))

    dx, dg, db = _layer_norm_backward(dhidden, cache["final_ln"], p["final_ln.gain"])
    grads["final_ln.gain"] += dg
    grads["final_ln.bias"] += db

    for i in reversed(range(cfg.layers)):
        pre = f"layers.{i}."
        lc = cache["layers"][i]
        b, t_len, m = lc["x_in"].shape

        df2 = dx
        if "ffn_drop" in lc:
            df2 = df2 * lc["ffn_drop"]
        flat_g = lc["g"].reshape(-1, cfg.d_ff)
        grads[pre + "ffn.w2"] += flat_g.T @ df2.reshape(-1, m)
        dg_act = df2 @ p[pre + "ffn.w2"].T
        df1 = dg_act * _gelu_grad(lc["f1"])
        grads[pre + "ffn.w1"] += lc["h2"].reshape(-1, m).T @ df1.reshape(-1, cfg.d_ff)
        dh2 = df1 @ p[pre + "ffn.w1"].T
        dx1, dgain, dbias = _layer_norm_backward(dh2, lc["ln2"], p[pre + "ln2.gain"])
        grads[pre + "ln2.gain"] += dgain
        grads[pre + "ln2.bias"] += dbias
        dx1 = dx1 + dx  # residual

        datt_out = dx1
        if "attn_drop" in lc:
            datt_out = datt_out * lc["attn_drop"]
        grads[pre + "attn.wo"] += lc["att"].reshape(-1, m).T @ datt_out.reshape(-1, m)
        datt = _split_heads(datt_out @ p[pre + "attn.wo"].T, cfg.n_heads)
        dprobs = datt @ lc["v"].transpose(0, 1, 3, 2)
        dv = lc["probs"].transpose(0, 1, 3, 2) @ datt
        dscores = lc["probs"] * (dprobs - np.sum(dprobs * lc["probs"], axis=-1, keepdims=True))
        dqr = (dscores @ lc["kr"]) * scale
        dkr = (dscores.transpose(0, 1, 3, 2) @ lc["qr"]) * scale
        dq = _merge_heads(_rope_unapply(dqr, cos, sin))
        dk = _merge_heads(_rope_unapply(dkr, cos, sin))
        dv = _merge_heads(dv)
        flat_h = lc["h"].reshape(-1, m)
        grads[pre + "attn.wq"] += flat_h.T @ dq.reshape(-1, m)
        grads[pre + "attn.wk"] += flat_h.T @ dk.reshape(-1, m)
        grads[pre + "attn.wv"] += flat_h.T @ dv.reshape(-1, m)
        dh = (
            dq @ p[pre + "attn.wq"].T
            + dk @ p[pre + "attn.wk"].T
            + dv @ p[pre + "attn.wv"].T
        )
        dx_ln, dgain, dbias = _layer_norm_backward(dh, lc["ln1"], p[pre + "ln1.gain"])
        grads[pre + "ln1.gain"] += dgain
        grads[pre + "ln1.bias"] += dbias
        dx = dx_ln + dx1  # residual

    ids = cache["ids"]
    np.add.at(grads["embed"], ids.reshape(-1), dx.reshape(-1, cfg.d_model))
    return grads


def forward(ckpt: Checkpoint, ids, mode: str = "eval", seed: int = 0,
            return_hidden: bool = False):
    """Logits for a single id sequence: (len, vocab). ``mode="train"`` enables
    seeded dropout; eval mode is deterministic."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    logits, hidden, _ = forward_batch(ckpt, np.asarray(ids), train=(mode == "train"),
                                      seed=seed)
    if return_hidden:
        return logits[0], hidden[0]
    return logits[0]


@dataclass
class DecodeOutput:
    ids: np.ndarray          # prefix followed by the continuation
    prefix_length: int
    stop_reason: str         # "eos" | "length"

    @property
    def continuation(self) -> np.ndarray:
        return self.ids[self.prefix_length:]


def decode(ckpt: Checkpoint, prefix, max_new: int, strategy: str = "greedy",
           temperature: float = 1.0, seed: int = 0, eos_id: int = None) -> DecodeOutput:
    """Autoregressive decoding from a prefix.

    Greedy picks the argmax with lowest-index tie-break; temperature sampling
    with tau -> 0 degenerates to the same. Decoding stops after ``max_new``
    tokens or when the end-of-sequence text token appears (not emitted).
    """
    if strategy not in ("greedy", "temperature"):
        raise ValueError(f"unknown strategy {strategy!r}")
    ids = [int(i) for i in prefix]
    prefix_len = len(ids)
    if prefix_len == 0:
        raise ValueError("empty prefix")
    if prefix_len + max_new > ckpt.config.max_len:
        raise ValueError(
            f"prefix ({prefix_len}) plus max_new ({max_new}) exceeds "
            f"max_len {ckpt.config.max_len}"
        )
    rng = np.random.default_rng(seed)
    stop_reason = "length"
    for _ in range(max_new):
        logits, _, _ = forward_batch(ckpt, np.asarray(ids, dtype=np.int64))
        row = logits[0, -1].astype(np.float64)
        if strategy == "greedy" or temperature < 1e-8:
            nxt = int(np.argmax(row))
        else:
            probs = _softmax(row / temperature)
            nxt = int(np.searchsorted(np.cumsum(probs), rng.random()))
            nxt = min(nxt, len(row) - 1)
        if eos_id is not None and nxt == eos_id:
            stop_reason = "eos"
            break
        ids.append(nxt)
    return DecodeOutput(np.asarray(ids, dtype=np.int64), prefix_len, stop_reason)


def save_checkpoint(path, ckpt: Checkpoint, config_hash: str = "") -> None:
    """TFK1 container: versioned JSON header, then named f32 tensors."""
    meta = {"config": ckpt.config.to_dict(), "step": ckpt.step}
    if config_hash:
        meta["config_hash"] = config_hash
    header = json.dumps(meta).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        f.write(struct.pack("<I", len(ckpt.tensors)))
        for name in sorted(ckpt.tensors):
            arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    version, header_len = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = 12
    header = json.loads(blob[offset : offset + header_len].decode("utf-8"))
    offset += header_len
    (n_tensors,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob[offset : offset + 4 * count], dtype="<f4")
        if arr.size != count:
            raise ValueError("checkpoint file truncated")
        offset += 4 * count
        tensors[name] = arr.reshape(shape).copy()
    cfg = ModelConfig(**header["config"])
    return Checkpoint(cfg, tensors, step=header.get("step", 0))
