"""Task derivation from dataset records and weighted multi-task streams.

Component weights follow count ** alpha (temperature downweighting of large
datasets) unless overridden. Streams are infinite, fully seeded, and byte
deterministic: the n-th draw depends only on (spec, store), so concurrent
consumers can safely partition draws by index.
"""

import json
from dataclasses import dataclass, field
from itertools import islice

import numpy as np

from .quantizer import AudioTokenSeq
from .vocab import JointVocabulary, TaskTag, serialize_example

_CONTENT_FIELDS = ("audio", "transcript", "translated_audio", "translated_transcript")

# fields a chain needs: input field of the first stage plus each stage's target
_CHAIN_FIELDS = {
    ("ASR",): ("audio", "transcript"),
    ("AST",): ("audio", "translated_transcript"),
    ("S2ST",): ("audio", "translated_audio"),
    ("TTS",): ("transcript", "audio"),
    ("MT",): ("transcript", "translated_transcript"),
    ("ASR", "AST"): ("audio", "transcript", "translated_transcript"),
    ("ASR", "AST", "S2ST"): (
        "audio",
        "transcript",
        "translated_transcript",
        "translated_audio",
    ),
}


@dataclass
class DatasetRecord:
    audio: AudioTokenSeq = None
    transcript: str = None
    translated_audio: AudioTokenSeq = None
    translated_transcript: str = None
    source_language: str = ""
    target_language: str = ""
    dataset_id: str = ""

    def __post_init__(self):
        present = [f for f in _CONTENT_FIELDS if getattr(self, f) is not None]
        if len(present) < 2:
            raise ValueError(f"record needs at least two content fields, has {present}")
        if (self.audio is not None or self.transcript is not None) and not self.source_language:
            raise ValueError("source_language required when source fields are present")
        if (
            self.translated_audio is not None or self.translated_transcript is not None
        ) and not self.target_language:
            raise ValueError("target_language required when translated fields are present")

    def has_fields(self, fields) -> bool:
        return all(getattr(self, f) is not None for f in fields)


def derive_tasks(record: DatasetRecord):
    """All task tags this record can serve, singles first then combined chains."""
    tags = []
    for chain, fields in _CHAIN_FIELDS.items():
        if record.has_fields(fields):
            target = (
                record.target_language if chain[-1] in ("AST", "S2ST", "MT") else None
            )
            tags.append(TaskTag(chain, record.source_language, target))
    return tags


@dataclass(frozen=True)
class MixtureComponent:
    dataset_id: str
    chain: tuple
    count: int
    weight_override: float = None

    def __post_init__(self):
        object.__setattr__(self, "chain", tuple(self.chain))
        if self.chain not in _CHAIN_FIELDS:
            raise ValueError(f"unsupported task chain {self.chain}")
        if self.count <= 0:
            raise ValueError("component example count must be positive")
        if self.weight_override is not None and self.weight_override < 0:
            raise ValueError("weight override must be nonnegative")


@dataclass(frozen=True)
class MixtureSpec:
    components: tuple
    alpha: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        if not self.components:
            raise ValueError("mixture needs at least one component")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"temperature alpha must lie in (0, 1], got {self.alpha}")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")


def component_weights(spec: MixtureSpec) -> np.ndarray:
    """Sampling probabilities: count ** alpha, overrides taken verbatim, then
    normalized to sum 1."""
    raw = np.array(
        [
            c.weight_override if c.weight_override is not None else c.count**spec.alpha
            for c in spec.components
        ],
        dtype=np.float64,
    )
    total = raw.sum()
    if total <= 0.0:
        raise ValueError("all component weights are zero")
    return raw / total


def _epoch_order(seed: int, comp_idx: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, comp_idx, epoch]).permutation(n)


def build_stream(spec: MixtureSpec, store, vocab: JointVocabulary):
    """Infinite deterministic iterator of serialized TrainingExamples.

    ``store`` maps dataset_id to a sequence of DatasetRecords. Each draw picks
    a component by its weight, then serves that component's records in a
    seeded per-epoch shuffle.
    """
    usable = []
    for comp in spec.components:
        if comp.dataset_id not in store:
            raise ValueError(f"dataset {comp.dataset_id!r} not found in store")
        fields = _CHAIN_FIELDS[comp.chain]
        records = [r for r in store[comp.dataset_id] if r.has_fields(fields)]
        if not records:
            raise ValueError(
                f"component ({comp.dataset_id!r}, {comp.chain}) has no serializable examples"
            )
        usable.append(records)
    weights = component_weights(spec)
    cumulative = np.cumsum(weights)

    def generator():
        rng = np.random.default_rng(spec.seed)
        cursors = [0] * len(spec.components)
        epochs = [0] * len(spec.components)
        orders = [
            _epoch_order(spec.seed, i, 0, len(recs)) for i, recs in enumerate(usable)
        ]
        while True:
            c = int(np.searchsorted(cumulative, rng.random(), side="right"))
            c = min(c, len(usable) - 1)
            if cursors[c] >= len(usable[c]):
                cursors[c] = 0
                epochs[c] += 1
                orders[c] = _epoch_order(spec.seed, c, epochs[c], len(usable[c]))
            record = usable[c][orders[c][cursors[c]]]
            cursors[c] += 1
            comp = spec.components[c]
            target = (
                record.target_language if comp.chain[-1] in ("AST", "S2ST", "MT") else None
            )
            tag = TaskTag(comp.chain, record.source_language, target)
            yield serialize_example(record, tag, vocab)

    return generator()


def partitioned_stream(spec: MixtureSpec, store, vocab: JointVocabulary,
                       worker: int, num_workers: int):
    """Consumer ``worker`` of ``num_workers``: takes draws congruent to its
    index, preserving the global draw order across workers."""
    if not 0 <= worker < num_workers:
        raise ValueError(f"worker {worker} out of range for {num_workers} workers")
    return islice(build_stream(spec, store, vocab), worker, None, num_workers)


def mixture_stats(spec: MixtureSpec, store=None) -> dict:
    """Per-component probabilities and per-task-chain example counts."""
    weights = component_weights(spec)
    components = []
    per_task = {}
    for comp, w in zip(spec.components, weights):
        entry = {
            "dataset_id": comp.dataset_id,
            "chain": list(comp.chain),
            "count": comp.count,
            "probability": float(w),
        }
        if store is not None and comp.dataset_id in store:
            fields = _CHAIN_FIELDS[comp.chain]
            entry["serializable"] = sum(
                1 for r in store[comp.dataset_id] if r.has_fields(fields)
            )
        components.append(entry)
        key = " ".join(comp.chain)
        per_task[key] = per_task.get(key, 0) + comp.count
    return {"alpha": spec.alpha, "seed": spec.seed,
            "components": components, "per_task_counts": per_task}


def _audio_to_json(seq: AudioTokenSeq):
    if seq is None:
        return None
    return {
        "tokens": [int(t) for t in seq.tokens],
        "token_rate": seq.token_rate,
        "codebook_id": seq.codebook_id,
    }


def _audio_from_json(obj):
    if obj is None:
        return None
    return AudioTokenSeq(
        np.asarray(obj["tokens"], dtype=np.int64),
        token_rate=obj.get("token_rate", 25.0),
        codebook_id=obj.get("codebook_id", ""),
    )


def record_to_json(record: DatasetRecord) -> dict:
    return {
        "audio": _audio_to_json(record.audio),
        "transcript": record.transcript,
        "translated_audio": _audio_to_json(record.translated_audio),
        "translated_transcript": record.translated_transcript,
        "source_language": record.source_language,
        "target_language": record.target_language,
        "dataset_id": record.dataset_id,
    }


def record_from_json(obj: dict) -> DatasetRecord:
    return DatasetRecord(
        audio=_audio_from_json(obj.get("audio")),
        transcript=obj.get("transcript"),
        translated_audio=_audio_from_json(obj.get("translated_audio")),
        translated_transcript=obj.get("translated_transcript"),
        source_language=obj.get("source_language", ""),
        target_language=obj.get("target_language", ""),
        dataset_id=obj.get("dataset_id", ""),
    )


def save_manifest(path, records) -> None:
    """Dataset manifest: one JSON record per line."""
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record_to_json(record)) + "\n")


def load_manifest(path):
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(record_from_json(json.loads(line)))
    return records


_SPEC_KEYS = {"components", "alpha", "seed"}
_COMPONENT_KEYS = {"dataset_id", "chain", "count", "weight"}


def mixture_spec_from_dict(obj: dict) -> MixtureSpec:
    unknown = set(obj) - _SPEC_KEYS
    if unknown:
        raise ValueError(f"unknown mixture spec keys {sorted(unknown)}")
    components = []
    for c in obj["components"]:
        extra = set(c) - _COMPONENT_KEYS
        if extra:
            raise ValueError(f"unknown component keys {sorted(extra)}")
        components.append(
            MixtureComponent(
                c["dataset_id"], tuple(c["chain"]), c["count"], c.get("weight")
            )
        )
    return MixtureSpec(tuple(components), obj.get("alpha", 0.5), obj.get("seed", 0))


def mixture_spec_to_dict(spec: MixtureSpec) -> dict:
    return {
        "alpha": spec.alpha,
        "seed": spec.seed,
        "components": [
            {
                "dataset_id": c.dataset_id,
                "chain": list(c.chain),
                "count": c.count,
                **({"weight": c.weight_override} if c.weight_override is not None else {}),
            }
            for c in spec.components
        ],
    }


def load_mixture_spec(path) -> MixtureSpec:
    with open(path, "r", encoding="utf-8") as f:
        return mixture_spec_from_dict(json.load(f))


def save_mixture_spec(path, spec: MixtureSpec) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(mixture_spec_to_dict(spec), f, indent=2)
        f.write("\n")
