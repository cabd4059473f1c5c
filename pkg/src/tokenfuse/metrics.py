"""Corpus BLEU, WER/CER, and an ASR-BLEU harness for audio hypotheses.

BLEU uses 13a-style tokenization (punctuation split off, case preserved) and
applies no other normalization; error rates lowercase, strip punctuation and
split before aligning. The two normalization regimes are intentionally
different and are recorded in every report.
"""

import json
import re
import unicodedata
import warnings
from dataclasses import dataclass
from math import exp, log

import numpy as np

from .quantizer import AudioTokenSeq

CER_LANGUAGES = frozenset({"Japanese", "Chinese"})
MAX_NGRAM_ORDER = 4


@dataclass
class EvalCorpus:
    """Paired (hypothesis, reference) items; hypotheses are text or audio
    token sequences, references are always text."""

    items: list
    language: str = "English"

    def __post_init__(self):
        if not self.items:
            raise ValueError("empty evaluation corpus")
        for item in self.items:
            if len(item) != 2:
                raise ValueError("corpus items must be (hypothesis, reference) pairs")

    def __len__(self):
        return len(self.items)


_13A_PUNCT = re.compile(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])")
_13A_PERIOD_PRE = re.compile(r"([^0-9])([\.,])")
_13A_PERIOD_POST = re.compile(r"([\.,])([^0-9])")
_13A_DASH = re.compile(r"([0-9])(-)")


def tokenize_13a(text: str):
    """mteval-13a style tokenization: unescape entities, split punctuation,
    keep case."""
    norm = text.replace("<skipped>", "").replace("-\n", "").replace("\n", " ")
    norm = (
        norm.replace("&quot;", '"')
        .replace("&amp;", "&")
        .replace("&lt;", "<")
        .replace("&gt;", ">")
    )
    norm = f" {norm} "
    norm = _13A_PUNCT.sub(r" \1 ", norm)
    norm = _13A_PERIOD_PRE.sub(r"\1 \2 ", norm)
    norm = _13A_PERIOD_POST.sub(r" \1 \2", norm)
    norm = _13A_DASH.sub(r"\1 - ", norm)
    return norm.split()


def _ngram_counts(tokens, n):
    counts = {}
    for i in range(len(tokens) - n + 1):
        key = tuple(tokens[i : i + n])
        counts[key] = counts.get(key, 0) + 1
    return counts


def corpus_bleu(corpus: EvalCorpus) -> float:
    """Corpus-level BLEU in [0, 100]: clipped n-gram precision for n=1..4
    pooled over the corpus, geometric mean with exponential smoothing of
    zero counts, times the brevity penalty."""
    matches = [0] * MAX_NGRAM_ORDER
    totals = [0] * MAX_NGRAM_ORDER
    hyp_len = 0
    ref_len = 0
    for hyp, ref in corpus.items:
        hyp_tok = tokenize_13a(hyp)
        ref_tok = tokenize_13a(ref)
        hyp_len += len(hyp_tok)
        ref_len += len(ref_tok)
        for n in range(1, MAX_NGRAM_ORDER + 1):
            hyp_counts = _ngram_counts(hyp_tok, n)
            ref_counts = _ngram_counts(ref_tok, n)
            matches[n - 1] += sum(
                min(c, ref_counts.get(g, 0)) for g, c in hyp_counts.items()
            )
            totals[n - 1] += max(0, len(hyp_tok) - n + 1)
    if hyp_len == 0:
        return 0.0
    log_precision = 0.0
    smooth = 1.0
    for n in range(MAX_NGRAM_ORDER):
        if totals[n] == 0:
            return 0.0
        if matches[n] == 0:
            smooth *= 2.0
            p = 1.0 / (smooth * totals[n])
        else:
            p = matches[n] / totals[n]
        log_precision += log(p) / MAX_NGRAM_ORDER
    brevity = 1.0 if hyp_len >= ref_len else exp(1.0 - ref_len / hyp_len)
    return 100.0 * brevity * exp(log_precision)


def normalize_for_error_rate(text: str):
    """Case-fold, strip punctuation (Unicode P*), split on whitespace — in
    that order."""
    lowered = text.lower()
    stripped = "".join(
        c for c in lowered if not unicodedata.category(c).startswith("P")
    )
    return stripped.split()


def levenshtein(a, b) -> int:
    """Edit distance (substitution, insertion, deletion all cost 1)."""
    if len(a) < len(b):
        a, b = b, a
    previous = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        current = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            current[j] = min(
                previous[j] + 1,
                current[j - 1] + 1,
                previous[j - 1] + (x != y),
            )
        previous = current
    return previous[len(b)]


def wer(corpus: EvalCorpus) -> float:
    """Corpus word error rate: total word-level edits over total reference
    words. Can exceed 1 when hypotheses carry many insertions."""
    edits = 0
    ref_words = 0
    for hyp, ref in corpus.items:
        hyp_words = normalize_for_error_rate(hyp)
        ref_tok = normalize_for_error_rate(ref)
        ref_words += len(ref_tok)
        edits += levenshtein(hyp_words, ref_tok)
    if ref_words == 0:
        raise ValueError("reference corpus has no words after normalization")
    return edits / ref_words


def cer(corpus: EvalCorpus) -> float:
    """Character error rate under the same normalization; whitespace is
    removed entirely for space-free scripts (Japanese, Chinese)."""
    space_free = corpus.language in CER_LANGUAGES
    edits = 0
    ref_chars = 0
    for hyp, ref in corpus.items:
        joiner = "" if space_free else " "
        hyp_chars = list(joiner.join(normalize_for_error_rate(hyp)))
        ref_seq = list(joiner.join(normalize_for_error_rate(ref)))
        ref_chars += len(ref_seq)
        edits += levenshtein(hyp_chars, ref_seq)
    if ref_chars == 0:
        raise ValueError("reference corpus has no characters after normalization")
    return edits / ref_chars


def error_rate(corpus: EvalCorpus):
    """Route to CER for Japanese/Chinese corpora, WER otherwise.
    Returns (metric_name, value)."""
    if corpus.language in CER_LANGUAGES:
        return "cer", cer(corpus)
    return "wer", wer(corpus)


def asr_bleu(corpus: EvalCorpus, transcriber) -> float:
    """BLEU of transcribed audio hypotheses against text references.

    ``transcriber`` maps an AudioTokenSeq to text and is injected by the
    caller. Items whose transcription fails are dropped from the score with
    a coverage warning.
    """
    pairs = []
    failures = []
    codebooks = set()
    for idx, (hyp, ref) in enumerate(corpus.items):
        if not isinstance(hyp, AudioTokenSeq):
            raise ValueError(f"item {idx}: ASR-BLEU needs audio token hypotheses")
        if hyp.codebook_id:
            codebooks.add(hyp.codebook_id)
        try:
            pairs.append((transcriber(hyp), ref))
        except Exception as exc:  # noqa: BLE001 - failures reported per item
            failures.append((idx, repr(exc)))
    if len(codebooks) > 1:
        raise ValueError(f"hypotheses mix codebooks {sorted(codebooks)}")
    if failures:
        warnings.warn(
            f"transcriber failed on {len(failures)}/{len(corpus)} items "
            f"(first: {failures[0]}); scoring the rest",
            stacklevel=2,
        )
    if not pairs:
        raise ValueError("transcriber failed on every item")
    return corpus_bleu(EvalCorpus(pairs, corpus.language))


def load_eval_pairs(path, audio: bool = False) -> list:
    """Line-delimited (hypothesis, reference) records."""
    items = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if audio:
                hyp = AudioTokenSeq(
                    np.asarray(rec["hypothesis_tokens"], dtype=np.int64),
                    token_rate=rec.get("token_rate", 25.0),
                    codebook_id=rec.get("codebook_id", ""),
                )
            else:
                hyp = rec["hypothesis"]
            items.append((hyp, rec["reference"]))
    return items


def make_report(corpus: EvalCorpus, scores: dict) -> dict:
    return {
        "scores": scores,
        "corpus_size": len(corpus),
        "language": corpus.language,
        "normalization": {
            "bleu": "13a-style tokenization, case preserved, no other normalization",
            "error_rates": "lowercase, strip Unicode punctuation, whitespace split",
            "cer_space_free_languages": sorted(CER_LANGUAGES),
        },
    }


def save_report(path, report: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2)
        f.write("\n")
