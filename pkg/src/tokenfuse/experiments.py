"""Toy-scale training worlds and the ablation suites built on them.

Each suite trains small models under two conditions differing in exactly one
choice (task mixture, initialization, task phrasing, or tokenizer) and
records per-seed metrics plus whether the expected direction held.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .metrics import EvalCorpus, asr_bleu, corpus_bleu
from .mixture import MixtureComponent, MixtureSpec, build_stream
from .model import Checkpoint, ModelConfig, decode, init_model, surgery
from .synth import SynthLanguageSpec, generate_corpus, make_language_pair, oracle_transcriber
from .training import LRSchedule, TrainConfig, train
from .vocab import JointVocabulary, TaskTag, build_joint_vocab, parse_stages, serialize_example

TEXT_VOCAB = 300


@dataclass
class ToyWorld:
    spec: SynthLanguageSpec
    vocab: JointVocabulary
    train_records: list
    heldout_records: list

    @property
    def store(self) -> dict:
        return {"train": self.train_records}


def build_toy_world(
    seed: int,
    n_words: int = 16,
    codebook_size: int = 64,
    n_train: int = 2048,
    n_heldout: int = 48,
    max_words: int = 4,
) -> ToyWorld:
    """Seeded corpus pair; held-out sentences never appear in training."""
    spec = make_language_pair(n_words=n_words, seed=seed, codebook_size=codebook_size)
    train_records = generate_corpus(
        spec, n_train, max_words=max_words, dataset_id="train", seed=seed * 7919 + 1
    )
    seen = {r.transcript for r in train_records}
    heldout = []
    attempt = 0
    while len(heldout) < n_heldout and attempt < 8:
        extra = generate_corpus(
            spec,
            2 * n_heldout,
            max_words=max_words,
            dataset_id="heldout",
            seed=seed * 7919 + 100 + attempt,
        )
        for r in extra:
            if r.transcript not in seen and len(heldout) < n_heldout:
                heldout.append(r)
                seen.add(r.transcript)
        attempt += 1
    vocab = build_joint_vocab(t=TEXT_VOCAB, a=spec.codebook.k)
    return ToyWorld(spec, vocab, train_records, heldout)


def default_model_config(world: ToyWorld, layers: int = 2, d_model: int = 128,
                         d_ff: int = 512, n_heads: int = 4,
                         max_len: int = 320) -> ModelConfig:
    return ModelConfig(
        layers=layers,
        d_model=d_model,
        n_heads=n_heads,
        d_ff=d_ff,
        max_len=max_len,
        vocab_text=world.vocab.t,
        vocab_audio=0,
    )


def fresh_joint_model(world: ToyWorld, cfg: ModelConfig, seed: int) -> Checkpoint:
    """Text-shaped init followed by zero-row audio surgery."""
    return surgery(init_model(cfg, seed=seed), world.vocab.a)


def train_on_mixture(
    world: ToyWorld,
    ckpt: Checkpoint,
    chains,
    steps: int,
    seed: int,
    lr: float = 1e-3,
    batch_size: int = 8,
    counts=None,
) -> Checkpoint:
    """Train on an equal-weight (or explicitly counted) mixture of task chains
    over the world's training records."""
    components = []
    for i, chain in enumerate(chains):
        count = len(world.train_records) if counts is None else counts[i]
        components.append(MixtureComponent("train", tuple(chain), count))
    mspec = MixtureSpec(tuple(components), alpha=0.5, seed=seed)
    stream = build_stream(mspec, world.store, world.vocab)
    tc = TrainConfig(batch_size=batch_size, seed=seed,
                     schedule=LRSchedule("constant", rate=lr), log_every=max(1, steps // 8))
    trained, _ = train(ckpt, stream, tc, steps=steps)
    return trained


def _reference_for(record, stage: str) -> str:
    return record.transcript if stage == "ASR" else record.translated_transcript


def decode_stages(ckpt: Checkpoint, world: ToyWorld, record, chain, max_new: int = 64):
    """Greedy-decode a task prompt and split the continuation into stages.
    Returns a {stage: ParsedStage} dict, or None when parsing fails."""
    vocab = world.vocab
    target = record.target_language if chain[-1] in ("AST", "S2ST", "MT") else None
    tag = TaskTag(tuple(chain), record.source_language, target)
    example = serialize_example(record, tag, vocab)
    prompt = example.ids[: example.prefix_length]
    out = decode(ckpt, prompt, max_new=max_new, eos_id=vocab.eos_id)
    try:
        parsed = parse_stages(out.continuation, vocab, expected=tuple(chain))
    except ValueError:
        return None
    return {p.stage: p for p in parsed}


def exact_match(ckpt: Checkpoint, world: ToyWorld, chain, score_stage: str,
                records=None, max_new: int = 64) -> float:
    """Fraction of records whose decoded ``score_stage`` text equals the
    reference exactly."""
    records = world.heldout_records if records is None else records
    hits = 0
    for record in records:
        stages = decode_stages(ckpt, world, record, chain, max_new=max_new)
        if stages is None or score_stage not in stages:
            continue
        try:
            text = stages[score_stage].text(world.vocab)
        except ValueError:
            continue
        hits += text == _reference_for(record, score_stage)
    return hits / len(records)


def stage_bleu(ckpt: Checkpoint, world: ToyWorld, chain, score_stage: str,
               records=None, max_new: int = 64) -> float:
    """Corpus BLEU of the decoded ``score_stage`` text against references;
    unparseable decodes score as empty hypotheses."""
    records = world.heldout_records if records is None else records
    pairs = []
    for record in records:
        stages = decode_stages(ckpt, world, record, chain, max_new=max_new)
        hyp = ""
        if stages is not None and score_stage in stages:
            try:
                hyp = stages[score_stage].text(world.vocab)
            except ValueError:
                hyp = ""
        pairs.append((hyp, _reference_for(record, score_stage)))
    return corpus_bleu(EvalCorpus(pairs))


@dataclass
class AblationRow:
    seed: int
    baseline: float
    treatment: float

    @property
    def direction_holds(self) -> bool:
        return self.treatment >= self.baseline


@dataclass
class AblationReport:
    suite: str
    baseline_name: str
    treatment_name: str
    rows: list
    details: dict = field(default_factory=dict)

    @property
    def wins(self) -> int:
        return sum(r.direction_holds for r in self.rows)

    @property
    def direction_holds(self) -> bool:
        return self.wins * 3 >= 2 * len(self.rows)  # >= 2/3 of runs

    def to_dict(self) -> dict:
        return {
            "suite": self.suite,
            "baseline": self.baseline_name,
            "treatment": self.treatment_name,
            "rows": [
                {
                    "seed": r.seed,
                    self.baseline_name: r.baseline,
                    self.treatment_name: r.treatment,
                    "direction_holds": r.direction_holds,
                }
                for r in self.rows
            ],
            "wins": self.wins,
            "runs": len(self.rows),
            "direction_holds": self.direction_holds,
            **self.details,
        }

    def table(self) -> str:
        width = max(len(self.baseline_name), len(self.treatment_name), 9)
        lines = [
            f"suite: {self.suite}",
            f"{'seed':>6}  {self.baseline_name:>{width}}  {self.treatment_name:>{width}}  holds",
        ]
        for r in self.rows:
            lines.append(
                f"{r.seed:>6}  {r.baseline:>{width}.3f}  {r.treatment:>{width}.3f}  "
                f"{str(r.direction_holds):>5}"
            )
        lines.append(
            f"direction holds in {self.wins}/{len(self.rows)} runs -> "
            f"{'PASS' if self.direction_holds else 'FAIL'}"
        )
        return "\n".join(lines)


@dataclass
class SuiteConfig:
    """Knobs shared by the ablation suites; tuned so a full suite of three
    seeds stays within a few minutes on a laptop CPU."""

    seeds: tuple = (0, 1, 2)
    n_words: int = 10
    codebook_size: int = 48
    n_train: int = 1024
    n_heldout: int = 40
    max_words: int = 4  # references must reach 4-gram length for BLEU
    layers: int = 2
    d_model: int = 64
    d_ff: int = 256
    steps: int = 1100
    ast_records: int = 64  # translated-field slice: AST supervision is scarce
    pretrain_steps: int = 600
    finetune_steps: int = 600


def _small_world(sc: SuiteConfig, seed: int, codebook_size=None) -> ToyWorld:
    return build_toy_world(
        seed,
        n_words=sc.n_words,
        codebook_size=codebook_size or sc.codebook_size,
        n_train=sc.n_train,
        n_heldout=sc.n_heldout,
        max_words=sc.max_words,
    )


def _small_model(sc: SuiteConfig, world: ToyWorld, seed: int) -> Checkpoint:
    cfg = default_model_config(
        world, layers=sc.layers, d_model=sc.d_model, d_ff=sc.d_ff
    )
    return fresh_joint_model(world, cfg, seed=seed)


def suite_multitask(sc: SuiteConfig = SuiteConfig()) -> AblationReport:
    """AST-only vs AST+ASR training, scored on held-out AST accuracy.

    The AST-capable slice of the corpus is kept small while ASR data stays
    plentiful, mirroring the data reality the multi-task result rests on.
    """
    rows = []
    for seed in sc.seeds:
        world = _small_world(sc, seed)
        # AST supervision restricted to a small slice; ASR data stays plentiful
        store = {
            "ast_slice": world.train_records[: sc.ast_records],
            "train": world.train_records,
        }
        tc = TrainConfig(batch_size=8, seed=seed,
                         schedule=LRSchedule("constant", rate=1e-3),
                         log_every=max(1, sc.steps // 8))

        base_spec = MixtureSpec(
            (MixtureComponent("ast_slice", ("AST",), sc.ast_records),), seed=seed
        )
        baseline = _small_model(sc, world, seed)
        baseline, _ = train(
            baseline, build_stream(base_spec, store, world.vocab), tc, steps=sc.steps
        )
        base_score = stage_bleu(baseline, world, ("AST",), "AST")

        treat_spec = MixtureSpec(
            (
                MixtureComponent("ast_slice", ("AST",), sc.ast_records, weight_override=1.0),
                MixtureComponent("train", ("ASR",), sc.n_train, weight_override=1.0),
            ),
            seed=seed,
        )
        treatment = _small_model(sc, world, seed)
        treatment, _ = train(
            treatment, build_stream(treat_spec, store, world.vocab), tc, steps=sc.steps
        )
        treat_score = stage_bleu(treatment, world, ("AST",), "AST")
        rows.append(AblationRow(seed, base_score, treat_score))
    return AblationReport("multitask", "ast_only", "ast_plus_asr", rows,
                          {"metric": "heldout AST corpus BLEU"})


def suite_init(sc: SuiteConfig = SuiteConfig()) -> AblationReport:
    """Training from scratch vs finetuning a text-pretrained checkpoint."""
    rows = []
    for seed in sc.seeds:
        world = _small_world(sc, seed)
        cfg = default_model_config(world, layers=sc.layers, d_model=sc.d_model, d_ff=sc.d_ff)

        scratch_cfg = ModelConfig(
            **{**cfg.to_dict(), "vocab_audio": world.vocab.a}
        )
        scratch = init_model(scratch_cfg, seed=seed)
        scratch = train_on_mixture(world, scratch, [("ASR",), ("AST",)],
                                   sc.finetune_steps, seed)
        scratch_score = stage_bleu(scratch, world, ("AST",), "AST")

        text_ckpt = init_model(cfg, seed=seed)
        text_ckpt = train_on_mixture(world, text_ckpt, [("MT",)], sc.pretrain_steps, seed)
        finetune = surgery(text_ckpt, world.vocab.a)
        finetune = train_on_mixture(world, finetune, [("ASR",), ("AST",)],
                                    sc.finetune_steps, seed)
        finetune_score = stage_bleu(finetune, world, ("AST",), "AST")
        rows.append(AblationRow(seed, scratch_score, finetune_score))
    return AblationReport("init", "from_scratch", "finetuned", rows,
                          {"metric": "heldout AST corpus BLEU"})


def suite_combined(sc: SuiteConfig = SuiteConfig()) -> AblationReport:
    """Direct AST vs the combined ASR->AST task scored on its final stage.

    Both arms see plentiful ASR data and the same scarce translated slice;
    the treatment differs only in phrasing that slice as a combined task.
    """
    rows = []
    for seed in sc.seeds:
        world = _small_world(sc, seed)
        store = {
            "ast_slice": world.train_records[: sc.ast_records],
            "train": world.train_records,
        }
        tc = TrainConfig(batch_size=8, seed=seed,
                         schedule=LRSchedule("constant", rate=1e-3),
                         log_every=max(1, sc.steps // 8))
        direct_spec = MixtureSpec(
            (
                MixtureComponent("train", ("ASR",), sc.n_train, weight_override=1.0),
                MixtureComponent("ast_slice", ("AST",), sc.ast_records, weight_override=1.0),
            ),
            seed=seed,
        )
        direct = _small_model(sc, world, seed)
        direct, _ = train(
            direct, build_stream(direct_spec, store, world.vocab), tc, steps=sc.steps
        )
        direct_score = stage_bleu(direct, world, ("AST",), "AST")

        combined_spec = MixtureSpec(
            (
                MixtureComponent("train", ("ASR",), sc.n_train, weight_override=1.0),
                MixtureComponent("ast_slice", ("ASR", "AST"), sc.ast_records,
                                 weight_override=1.0),
            ),
            seed=seed,
        )
        combined = _small_model(sc, world, seed)
        combined, _ = train(
            combined, build_stream(combined_spec, store, world.vocab), tc, steps=sc.steps
        )
        combined_score = stage_bleu(combined, world, ("ASR", "AST"), "AST", max_new=96)
        rows.append(AblationRow(seed, direct_score, combined_score))
    return AblationReport("combined", "direct_ast", "combined_ast", rows,
                          {"metric": "heldout AST corpus BLEU (final stage)"})


def suite_s2st(sc: SuiteConfig = SuiteConfig()) -> AblationReport:
    """Adding speech-target tasks yields S2ST output that parse_stages can
    split and whose audio stage transcribes back to sensible text."""
    rows = []
    bleu_rows = []
    for seed in sc.seeds:
        world = _small_world(sc, seed)
        model = _small_model(sc, world, seed)
        model = train_on_mixture(
            world,
            model,
            [("ASR",), ("AST",), ("S2ST",), ("ASR", "AST", "S2ST")],
            sc.steps,
            seed,
        )
        parseable = 0
        audio_hyps = []
        refs = []
        for record in world.heldout_records:
            stages = decode_stages(
                model, world, record, ("ASR", "AST", "S2ST"), max_new=128
            )
            if stages is None or "S2ST" not in stages:
                continue
            try:
                tokens = stages["S2ST"].audio_tokens(world.vocab)
            except ValueError:
                continue
            if len(tokens) == 0:
                continue
            parseable += 1
            audio_hyps.append(tokens)
            refs.append(record.translated_transcript)
        frac = parseable / len(world.heldout_records)
        score = 0.0
        if audio_hyps:
            from .quantizer import AudioTokenSeq

            transcriber = oracle_transcriber(world.spec)
            corpus = EvalCorpus(
                [
                    (AudioTokenSeq(t, codebook_id=world.spec.codebook.codebook_id), r)
                    for t, r in zip(audio_hyps, refs)
                ]
            )
            score = asr_bleu(corpus, transcriber)
        rows.append(AblationRow(seed, 0.5, frac))  # working == majority parseable
        bleu_rows.append(score)
    return AblationReport(
        "s2st", "required_fraction", "parseable_fraction", rows,
        {"metric": "fraction of held-out decodes with a parseable S2ST stage",
         "asr_bleu_per_seed": bleu_rows},
    )


def suite_tokens(sc: SuiteConfig = SuiteConfig(), coarse_k: int = 16) -> AblationReport:
    """Coarse vs fine audio tokenizer (small vs default codebook)."""
    rows = []
    for seed in sc.seeds:
        coarse_world = _small_world(sc, seed, codebook_size=coarse_k)
        coarse = _small_model(sc, coarse_world, seed)
        coarse = train_on_mixture(coarse_world, coarse, [("ASR",), ("AST",)],
                                  sc.steps, seed)
        coarse_score = stage_bleu(coarse, coarse_world, ("AST",), "AST")

        fine_world = _small_world(sc, seed)
        fine = _small_model(sc, fine_world, seed)
        fine = train_on_mixture(fine_world, fine, [("ASR",), ("AST",)], sc.steps, seed)
        fine_score = stage_bleu(fine, fine_world, ("AST",), "AST")
        rows.append(AblationRow(seed, coarse_score, fine_score))
    return AblationReport(
        "tokens", f"codebook_{coarse_k}", f"codebook_{sc.codebook_size}", rows,
        {"metric": "heldout AST corpus BLEU"},
    )


SUITES = {
    "multitask": suite_multitask,
    "init": suite_init,
    "combined": suite_combined,
    "s2st": suite_s2st,
    "tokens": suite_tokens,
}


def run_suite(name: str, sc: SuiteConfig = None) -> AblationReport:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    return SUITES[name](sc or SuiteConfig())
