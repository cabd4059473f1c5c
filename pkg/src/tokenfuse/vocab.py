"""Joint text+audio vocabulary, task tags, and example serialization.

Text ids occupy [0, t) and audio token k maps to id t + k. Text encoding is
byte-level (ids 0..255 are raw bytes) plus a small fixed set of merged tokens
for tag words and language names; id 256 is the reserved end-of-sequence
token. Tags and stage markers are ordinary text run through this tokenizer —
no special tokens exist.
"""

import json
import re
from dataclasses import dataclass, field

import numpy as np

EOS_ID = 256

STAGES = ("ASR", "AST", "S2ST", "TTS", "MT")
# stages whose output is in the target language (tag must name it)
TRANSLATING_STAGES = frozenset({"AST", "S2ST", "MT"})
# only these chains combine; order mirrors the stage dependency ASR < AST < S2ST
COMBINABLE = ("ASR", "AST", "S2ST")

DEFAULT_MERGES = (
    "[ASR",
    "[AST",
    "[S2ST",
    "[TTS",
    "[MT",
    "]",
    "English",
    "French",
    "German",
    "Spanish",
    "Japanese",
    "Chinese",
)

_LANG_RE = re.compile(r"^[^\s\[\]]+$")


@dataclass(frozen=True)
class TaskTag:
    chain: tuple
    source_language: str
    target_language: str = None

    def __post_init__(self):
        object.__setattr__(self, "chain", tuple(self.chain))
        if not self.chain:
            raise ValueError("task chain is empty")
        for stage in self.chain:
            if stage not in STAGES:
                raise ValueError(f"unknown stage {stage!r}")
        if len(self.chain) > 1:
            positions = []
            for stage in self.chain:
                if stage not in COMBINABLE:
                    raise ValueError(f"stage {stage!r} cannot appear in a combined chain")
                positions.append(COMBINABLE.index(stage))
            if positions != sorted(set(positions)):
                raise ValueError(f"chain {self.chain} violates stage ordering")
        needs_target = self.chain[-1] in TRANSLATING_STAGES
        if needs_target and not self.target_language:
            raise ValueError(f"chain {self.chain} requires a target language")
        if not needs_target and self.target_language:
            raise ValueError(f"chain {self.chain} takes no target language")
        for lang in (self.source_language, self.target_language):
            if lang is not None and not _LANG_RE.match(lang):
                raise ValueError(f"bad language name {lang!r} (single word, no brackets)")


def render_tag(tag: TaskTag) -> str:
    """Exact bracketed surface form, e.g. "[ASR French]" or
    "[ASR AST S2ST English French]"."""
    words = list(tag.chain) + [tag.source_language]
    if tag.target_language:
        words.append(tag.target_language)
    return "[" + " ".join(words) + "]"


_ALIAS_TEMPLATES = {
    ("ASR",): "transcribe the following {src} audio",
    ("AST",): "translate the following {src} audio into {tgt} text",
    ("S2ST",): "translate the following {src} audio into {tgt} speech",
    ("TTS",): "read out the following {src} text",
    ("MT",): "translate the following {src} text into {tgt} text",
}

_ALIAS_PATTERNS = [
    (re.compile("^" + re.escape(tpl).replace(r"\{src\}", r"(?P<src>\S+)")
                .replace(r"\{tgt\}", r"(?P<tgt>\S+)") + "$"), chain)
    for chain, tpl in _ALIAS_TEMPLATES.items()
]


def alias_for(tag: TaskTag) -> str:
    """Human-readable tag form equivalent to the bracketed tag."""
    tpl = _ALIAS_TEMPLATES.get(tag.chain)
    if tpl is None:
        raise ValueError(f"no alias for chain {tag.chain}")
    return tpl.format(src=tag.source_language, tgt=tag.target_language or "")


def parse_tag_text(text: str) -> TaskTag:
    """Parse either the bracketed form or a human-readable alias."""
    text = text.strip()
    if text.startswith("[") and text.endswith("]"):
        words = text[1:-1].split()
        chain = []
        for w in words:
            if w in STAGES:
                chain.append(w)
            else:
                break
        langs = words[len(chain):]
        if not chain or len(langs) not in (1, 2):
            raise ValueError(f"cannot parse tag {text!r}")
        return TaskTag(tuple(chain), langs[0], langs[1] if len(langs) == 2 else None)
    for pattern, chain in _ALIAS_PATTERNS:
        m = pattern.match(text)
        if m:
            tgt = m.groupdict().get("tgt") or None
            return TaskTag(chain, m.group("src"), tgt)
    raise ValueError(f"cannot parse tag {text!r}")


@dataclass(frozen=True)
class JointVocabulary:
    t: int
    a: int
    merges: tuple = DEFAULT_MERGES

    def __post_init__(self):
        if self.t < 256:
            raise ValueError(f"t={self.t} cannot cover the 256 byte tokens")
        if self.a < 1:
            raise ValueError("need at least one audio token")
        usable = max(0, self.t - 257)
        object.__setattr__(self, "merges", tuple(self.merges)[:usable])
        # longest-first so greedy matching prefers e.g. "[S2ST" over "["
        table = sorted(
            ((m.encode("utf-8"), 257 + i) for i, m in enumerate(self.merges)),
            key=lambda kv: -len(kv[0]),
        )
        object.__setattr__(self, "_merge_table", table)
        object.__setattr__(
            self, "_id_to_bytes", {mid: mb for mb, mid in table}
        )

    @property
    def total(self) -> int:
        return self.t + self.a

    @property
    def eos_id(self):
        return EOS_ID if self.t > EOS_ID else None

    def encode_bytes(self, data: bytes):
        ids = []
        i = 0
        n = len(data)
        while i < n:
            for mb, mid in self._merge_table:
                if data.startswith(mb, i):
                    ids.append(mid)
                    i += len(mb)
                    break
            else:
                ids.append(data[i])
                i += 1
        return ids

    def decode_bytes(self, ids) -> bytes:
        out = bytearray()
        for tid in ids:
            tid = int(tid)
            if 0 <= tid < 256:
                out.append(tid)
            elif tid == EOS_ID:
                continue
            elif tid in self._id_to_bytes:
                out.extend(self._id_to_bytes[tid])
            elif tid < self.t:
                continue  # reserved, unused text id
            else:
                raise ValueError(f"id {tid} is an audio token, not text")
        return bytes(out)

    def encode_text(self, text: str):
        return self.encode_bytes(text.encode("utf-8"))

    def decode_text(self, ids) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    def audio_id(self, token: int) -> int:
        if not 0 <= token < self.a:
            raise ValueError(f"audio token {token} out of range [0, {self.a})")
        return self.t + token

    def is_audio_id(self, tid: int) -> bool:
        return self.t <= tid < self.total

    def audio_token(self, tid: int) -> int:
        if not self.is_audio_id(tid):
            raise ValueError(f"id {tid} is not an audio id")
        return tid - self.t


def build_joint_vocab(t: int = 300, a: int = 1024, merges=DEFAULT_MERGES) -> JointVocabulary:
    return JointVocabulary(t, a, merges)


def save_vocab(path, vocab: JointVocabulary) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("tokenfuse-vocab v1\n")
        f.write(f"t {vocab.t}\n")
        f.write(f"a {vocab.a}\n")
        f.write(f"eos {vocab.eos_id if vocab.eos_id is not None else -1}\n")
        for i, m in enumerate(vocab.merges):
            f.write(f"merge {257 + i} {json.dumps(m)}\n")


def load_vocab(path) -> JointVocabulary:
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if not lines or lines[0] != "tokenfuse-vocab v1":
        raise ValueError("not a vocabulary manifest")
    fields = {}
    merges = []
    for ln in lines[1:]:
        key, rest = ln.split(" ", 1)
        if key == "merge":
            mid, text = rest.split(" ", 1)
            merges.append((int(mid), json.loads(text)))
        else:
            fields[key] = int(rest)
    merges.sort()
    return JointVocabulary(fields["t"], fields["a"], tuple(m for _, m in merges))


@dataclass
class TrainingExample:
    ids: np.ndarray
    loss_mask: np.ndarray
    stage_spans: list
    task: TaskTag

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.loss_mask = np.asarray(self.loss_mask, dtype=np.int8)
        if self.ids.shape != self.loss_mask.shape:
            raise ValueError("ids and loss_mask lengths differ")
        diffs = np.diff(self.loss_mask.astype(np.int32))
        if np.any(self.loss_mask < 0) or np.any(self.loss_mask > 1) or np.any(diffs < 0):
            raise ValueError("loss mask must be a 0...0 1...1 step")
        if not np.any(self.loss_mask == 1):
            raise ValueError("loss mask selects no target positions")

    def __len__(self):
        return len(self.ids)

    @property
    def prefix_length(self) -> int:
        """Length of the tag+input region (the mask-0 prefix)."""
        return int(np.argmax(self.loss_mask))


_STAGE_FIELD = {
    "ASR": "transcript",
    "AST": "translated_transcript",
    "S2ST": "translated_audio",
    "TTS": "audio",
    "MT": "translated_transcript",
}

_AUDIO_STAGES = frozenset({"S2ST", "TTS"})


def stage_marker(stage: str) -> str:
    return f"[{stage}]"


def _require(record, field_name: str, tag: TaskTag):
    value = getattr(record, field_name, None)
    if value is None:
        raise ValueError(f"task {tag.chain} needs record field {field_name!r}")
    return value


def serialize_example(record, tag: TaskTag, vocab: JointVocabulary,
                      tag_text: str = None) -> TrainingExample:
    """Lay out tag + input + per-stage targets, with loss masked off the input.

    Each target stage opens with its marker (e.g. "[ASR]") rendered as plain
    text; the reserved end-of-sequence token closes the example. ``tag_text``
    substitutes a human-readable alias for the bracketed tag without changing
    anything past the tag tokens.
    """
    if vocab.eos_id is None:
        raise ValueError("vocabulary has no room for the end-of-sequence token (t <= 256)")

    codebook_ids = set()

    def audio_ids(token_seq):
        if token_seq.codebook_id:
            codebook_ids.add(token_seq.codebook_id)
            if len(codebook_ids) > 1:
                raise ValueError(f"record mixes codebooks {sorted(codebook_ids)}")
        toks = token_seq.tokens
        if len(toks) and int(toks.max()) >= vocab.a:
            raise ValueError(
                f"audio token {int(toks.max())} exceeds audio vocabulary {vocab.a}"
            )
        return [vocab.t + int(tok) for tok in toks]

    ids = list(vocab.encode_text(tag_text if tag_text is not None else render_tag(tag)))
    first = tag.chain[0]
    if first in ("ASR", "AST", "S2ST"):
        ids.extend(audio_ids(_require(record, "audio", tag)))
    else:  # TTS and MT read the transcript
        ids.extend(vocab.encode_text(" " + _require(record, "transcript", tag)))
    prefix_len = len(ids)

    spans = []
    for stage in tag.chain:
        start = len(ids)
        ids.extend(vocab.encode_text(stage_marker(stage)))
        value = _require(record, _STAGE_FIELD[stage], tag)
        if stage in _AUDIO_STAGES:
            ids.extend(audio_ids(value))
        else:
            ids.extend(vocab.encode_text(" " + value))
        spans.append([stage, start, len(ids)])
    ids.append(vocab.eos_id)
    spans[-1][2] = len(ids)

    mask = np.zeros(len(ids), dtype=np.int8)
    mask[prefix_len:] = 1
    return TrainingExample(
        np.asarray(ids, dtype=np.int64),
        mask,
        [tuple(s) for s in spans],
        tag,
    )


@dataclass
class ParsedStage:
    stage: str
    ids: np.ndarray
    span: tuple  # (start, end) in the input sequence, marker included

    def text(self, vocab: JointVocabulary) -> str:
        return vocab.decode_text(self.ids).strip()

    def audio_tokens(self, vocab: JointVocabulary) -> np.ndarray:
        return np.asarray([vocab.audio_token(int(i)) for i in self.ids], dtype=np.int64)


def parse_stages(ids, vocab: JointVocabulary, expected=None):
    """Split a decoded continuation into its stage segments.

    ``ids`` must not include the tag/input prefix. Content before the first
    marker is attributed to the first expected stage. A single trailing
    end-of-sequence token is ignored. The returned spans partition the
    sequence, so re-concatenating ``ids[start:end]`` reproduces it.
    """
    ids = [int(i) for i in ids]
    if vocab.eos_id is not None and ids and ids[-1] == vocab.eos_id:
        ids = ids[:-1]
    markers = {stage: vocab.encode_text(stage_marker(stage)) for stage in STAGES}

    hits = []  # (position, stage, marker_len)
    i = 0
    while i < len(ids):
        for stage, marker in markers.items():
            if ids[i : i + len(marker)] == marker:
                hits.append((i, stage, len(marker)))
                i += len(marker)
                break
        else:
            i += 1

    out = []
    if not hits:
        if expected is not None and len(expected) == 1:
            return [ParsedStage(expected[0], np.asarray(ids, dtype=np.int64), (0, len(ids)))]
        raise ValueError(
            "no recognizable stage marker"
            + (f" (expected stages {tuple(expected)})" if expected else "")
        )
    if hits[0][0] > 0:
        if expected is None:
            raise ValueError("unmarked content before the first stage marker")
        out.append(
            ParsedStage(expected[0], np.asarray(ids[: hits[0][0]], dtype=np.int64),
                        (0, hits[0][0]))
        )
    for n, (pos, stage, mlen) in enumerate(hits):
        end = hits[n + 1][0] if n + 1 < len(hits) else len(ids)
        out.append(
            ParsedStage(stage, np.asarray(ids[pos + mlen : end], dtype=np.int64), (pos, end))
        )
    return out
