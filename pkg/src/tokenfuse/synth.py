"""Deterministic synthetic paired speech-text corpora.

Each word of a toy language renders as a fixed motif of three pure tones
(120 ms per tone, so one word spans exactly nine 40 ms hops of the default
frontend). Motifs are checked to be well separated in log-mel space at
construction, which makes an exact token-matching transcriber possible.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .audio import FrontendConfig, Waveform, extract_features
from .mixture import DatasetRecord
from .quantizer import AudioTokenSeq, Codebook, tokenize, train_codebook

TONE_SECONDS = 0.12
TONES_PER_WORD = 3
FRAMES_PER_WORD = 9  # TONE_SECONDS * TONES_PER_WORD * 25 Hz
PURE_FRAMES_PER_WORD = 7  # frames an isolated word emits under the frontend
MOTIF_MARGIN = 2.0  # min pairwise distance between mean log-mel vectors
UNKNOWN_WORD = "<unk>"

_CONSONANTS = "bdfgklmnprst"
_VOWELS = "aeiou"


def _word_list(count: int, skip: int = 0):
    words = []
    for c1 in _CONSONANTS:
        for v in _VOWELS:
            for c2 in _CONSONANTS:
                words.append(c1 + v + c2)
    if skip + count > len(words):
        raise ValueError(f"cannot build {count} words with offset {skip}")
    return tuple(words[skip : skip + count])


def _render_motif(tones, sample_rate: int) -> np.ndarray:
    tone_len = int(round(TONE_SECONDS * sample_rate))
    t = np.arange(tone_len) / sample_rate
    ramp_len = int(0.005 * sample_rate)
    envelope = np.ones(tone_len)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp_len) / ramp_len)
    envelope[:ramp_len] = ramp
    envelope[-ramp_len:] = ramp[::-1]
    return np.concatenate(
        [0.5 * envelope * np.sin(2.0 * np.pi * freq * t) for freq in tones]
    )


@dataclass
class SynthLanguageSpec:
    """A toy language pair: word lists, per-word tone motifs, a bijective
    translation table, and the codebook trained over all word motifs."""

    source_words: tuple
    target_words: tuple
    word_tones: dict  # word -> tuple of TONES_PER_WORD frequencies in Hz
    translation: dict  # source word -> target word
    seed: int = 0
    source_language: str = "English"
    target_language: str = "French"
    codebook_size: int = 64
    frontend: FrontendConfig = field(default_factory=FrontendConfig)

    def __post_init__(self):
        self.source_words = tuple(self.source_words)
        self.target_words = tuple(self.target_words)
        if set(self.source_words) & set(self.target_words):
            raise ValueError("source and target vocabularies must be disjoint")
        if set(self.translation) != set(self.source_words) or set(
            self.translation.values()
        ) != set(self.target_words):
            raise ValueError("translation table must map source words onto target words")
        all_words = self.source_words + self.target_words
        missing = [w for w in all_words if w not in self.word_tones]
        if missing:
            raise ValueError(f"words without motifs: {missing}")

        feats = {w: self.word_features(w) for w in all_words}
        means = np.stack([feats[w].frames.mean(axis=0) for w in all_words])
        d = np.sqrt(
            np.maximum(
                np.sum((means[:, None, :] - means[None, :, :]) ** 2, axis=-1), 0.0
            )
        )
        np.fill_diagonal(d, np.inf)
        worst = float(d.min())
        if worst <= MOTIF_MARGIN:
            i, j = np.unravel_index(int(np.argmin(d)), d.shape)
            raise ValueError(
                f"motifs for {all_words[i]!r} and {all_words[j]!r} are too close "
                f"({worst:.3f} <= margin {MOTIF_MARGIN})"
            )

        self.codebook = train_codebook(
            [feats[w] for w in all_words], k=self.codebook_size, seed=self.seed
        )
        self._patterns = {
            w: tuple(tokenize(feats[w], self.codebook).tokens) for w in all_words
        }
        if len(set(self._patterns.values())) != len(all_words):
            raise ValueError("codebook too coarse: two words share a token pattern")

    def render_word(self, word: str) -> np.ndarray:
        return _render_motif(self.word_tones[word], self.frontend.sample_rate)

    def render_sentence(self, words) -> Waveform:
        return Waveform(
            np.concatenate([self.render_word(w) for w in words]),
            self.frontend.sample_rate,
        )

    def word_features(self, word: str):
        return extract_features(
            Waveform(self.render_word(word), self.frontend.sample_rate), self.frontend
        )

    def word_pattern(self, word: str) -> tuple:
        return self._patterns[word]

    def sentence_tokens(self, words) -> AudioTokenSeq:
        feats = extract_features(self.render_sentence(words), self.frontend)
        return tokenize(feats, self.codebook)

    def translate(self, words):
        return [self.translation[w] for w in words]


def make_language_pair(
    n_words: int = 16,
    seed: int = 0,
    codebook_size: int = 64,
    n_tones: int = 12,
    source_language: str = "English",
    target_language: str = "French",
) -> SynthLanguageSpec:
    """Build a language pair with distinct seeded tone triplets per word."""
    rng = np.random.default_rng([seed, 2023])
    freqs = np.geomspace(350.0, 3600.0, n_tones)
    total = 2 * n_words
    if n_tones**TONES_PER_WORD < total:
        raise ValueError(f"{n_tones} tones cannot yield {total} distinct motifs")
    triplets = set()
    assignments = []
    while len(assignments) < total:
        cand = tuple(int(i) for i in rng.integers(0, n_tones, TONES_PER_WORD))
        if cand not in triplets:
            triplets.add(cand)
            assignments.append(cand)
    source_words = _word_list(n_words)
    target_words = _word_list(n_words, skip=n_words)
    word_tones = {
        w: tuple(float(freqs[i]) for i in tri)
        for w, tri in zip(source_words + target_words, assignments)
    }
    translation = dict(zip(source_words, target_words))
    return SynthLanguageSpec(
        source_words,
        target_words,
        word_tones,
        translation,
        seed=seed,
        source_language=source_language,
        target_language=target_language,
        codebook_size=codebook_size,
    )


def generate_corpus(
    spec: SynthLanguageSpec,
    n: int,
    max_words: int = 4,
    dataset_id: str = None,
    seed: int = None,
) -> list:
    """Fully seeded records carrying all four content fields."""
    if n < 1 or max_words < 1:
        raise ValueError("need n >= 1 and max_words >= 1")
    rng = np.random.default_rng([spec.seed if seed is None else seed, 811])
    if dataset_id is None:
        dataset_id = f"synth-{spec.seed}"
    records = []
    for _ in range(n):
        length = int(rng.integers(1, max_words + 1))
        words = [spec.source_words[i] for i in rng.integers(0, len(spec.source_words), length)]
        translated = spec.translate(words)
        records.append(
            DatasetRecord(
                audio=spec.sentence_tokens(words),
                transcript=" ".join(words),
                translated_audio=spec.sentence_tokens(translated),
                translated_transcript=" ".join(translated),
                source_language=spec.source_language,
                target_language=spec.target_language,
                dataset_id=dataset_id,
            )
        )
    return records


def save_spec(path, spec: SynthLanguageSpec) -> None:
    """Language specs rebuild their codebook deterministically on load."""
    obj = {
        "source_words": list(spec.source_words),
        "target_words": list(spec.target_words),
        "word_tones": {w: list(t) for w, t in spec.word_tones.items()},
        "translation": dict(spec.translation),
        "seed": spec.seed,
        "source_language": spec.source_language,
        "target_language": spec.target_language,
        "codebook_size": spec.codebook_size,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2)
        f.write("\n")


def load_spec(path) -> SynthLanguageSpec:
    with open(path, "r", encoding="utf-8") as f:
        obj = json.load(f)
    return SynthLanguageSpec(
        tuple(obj["source_words"]),
        tuple(obj["target_words"]),
        {w: tuple(t) for w, t in obj["word_tones"].items()},
        dict(obj["translation"]),
        seed=obj.get("seed", 0),
        source_language=obj.get("source_language", "English"),
        target_language=obj.get("target_language", "French"),
        codebook_size=obj.get("codebook_size", 64),
    )


def oracle_transcriber(spec: SynthLanguageSpec, vocabulary: str = "both"):
    """Exact transcriber for clean synthetic audio.

    Words occupy fixed 9-frame blocks whose leading frames coincide sample
    for sample with the isolated word's frames, so matching each block's
    first tokens against the canonical per-word patterns recovers the
    sentence exactly. Unmatchable blocks emit an unknown-word marker.
    """
    if vocabulary == "both":
        words = spec.source_words + spec.target_words
    elif vocabulary == "source":
        words = spec.source_words
    elif vocabulary == "target":
        words = spec.target_words
    else:
        raise ValueError(f"vocabulary must be source/target/both, got {vocabulary!r}")
    patterns = {w: np.asarray(spec.word_pattern(w), dtype=np.int64) for w in words}
    pattern_matrix = np.stack([patterns[w] for w in words])

    def transcribe(tokens: AudioTokenSeq) -> str:
        if tokens.codebook_id and tokens.codebook_id != spec.codebook.codebook_id:
            raise ValueError("audio was not tokenized with this corpus codebook")
        seq = tokens.tokens
        # a W-word sentence yields 9W - 2 frames under the default frontend
        n_words = int(round((len(seq) + 2) / FRAMES_PER_WORD))
        out = []
        for b in range(n_words):
            block = seq[b * FRAMES_PER_WORD : b * FRAMES_PER_WORD + PURE_FRAMES_PER_WORD]
            if len(block) == 0:
                break
            mismatches = np.sum(pattern_matrix[:, : len(block)] != block[None, :], axis=1)
            best = int(np.argmin(mismatches))
            if mismatches[best] > len(block) // 2:
                out.append(UNKNOWN_WORD)
            else:
                out.append(words[best])
        return " ".join(out)

    return transcribe
