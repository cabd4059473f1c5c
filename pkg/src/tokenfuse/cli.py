"""One binary, subcommand style: the pipeline over the shared file formats.

Every artifact written carries its format magic plus the producing config
hash (binary containers in a footer or header field, JSONL files as a leading
header record that all loaders skip). Exit codes: 0 success, 1 usage error,
2 data error; errors also go to stderr as one JSON record.
"""

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import audio, metrics, mixture, model, quantizer, synth, training, vocab as vocab_mod
from .experiments import SuiteConfig, run_suite


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dataclass_from(cls, obj: dict, path: str):
    known = {f.name for f in fields(cls)}
    unknown = set(obj) - known
    if unknown:
        raise ValueError(f"unknown keys {sorted(unknown)} in config section {path!r}")
    return cls(**obj)


@dataclass
class CodebookSettings:
    k: int = quantizer.DEFAULT_CODEBOOK_SIZE
    max_iters: int = quantizer.DEFAULT_MAX_ITERS
    tol: float = quantizer.DEFAULT_TOL


@dataclass
class VocabSettings:
    t: int = 300
    a: int = 1024


@dataclass
class ModelSettings:
    layers: int = 2
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    max_len: int = 1024
    dropout: float = 0.1


@dataclass
class TrainingSettings:
    batch_size: int = 8
    steps: int = 1000
    schedule: str = "constant"
    rate: float = 5e-5
    peak: float = 1e-4
    end: float = 1e-5
    warmup: int = 1000
    half_life: int = 2000
    log_every: int = 10

    def lr_schedule(self) -> training.LRSchedule:
        return training.LRSchedule(
            kind=self.schedule, rate=self.rate, peak=self.peak,
            end=self.end, warmup=self.warmup, half_life=self.half_life,
        )


@dataclass
class RunConfig:
    """Declarative settings for the whole pipeline; only the seed has no
    default. Unknown keys anywhere are rejected."""

    seed: int
    frontend: audio.FrontendConfig = field(default_factory=audio.FrontendConfig)
    codebook: CodebookSettings = field(default_factory=CodebookSettings)
    vocab: VocabSettings = field(default_factory=VocabSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    training: TrainingSettings = field(default_factory=TrainingSettings)

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        if "seed" not in obj:
            raise ValueError("config must set a seed")
        sections = {
            "frontend": audio.FrontendConfig,
            "codebook": CodebookSettings,
            "vocab": VocabSettings,
            "model": ModelSettings,
            "training": TrainingSettings,
        }
        kwargs = {"seed": int(obj["seed"])}
        for name, section_cls in sections.items():
            if name in obj:
                kwargs[name] = _dataclass_from(section_cls, obj[name], name)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    @property
    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return RunConfig.load(args.config)
    return RunConfig(seed=getattr(args, "seed", 0) or 0)


def _emit(args, payload: dict, human: str) -> None:
    if args.json:
        print(json.dumps(payload))
    else:
        print(human)


def _write_jsonl(path, records, magic: str, config_hash: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"_magic": magic, "_config_hash": config_hash}) + "\n")
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def _read_jsonl(path):
    header = {}
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if isinstance(obj, dict) and "_magic" in obj:
                header = obj
                continue
            records.append(obj)
    return header, records


def _load_manifest_file(path):
    _, records = _read_jsonl(path)
    return [mixture.record_from_json(obj) for obj in records]


def _store_from_args(pairs):
    store = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--manifest expects id=path, got {pair!r}")
        dataset_id, path = pair.split("=", 1)
        store[dataset_id] = _load_manifest_file(path)
    return store


# ---------------------------------------------------------------- commands


def _cmd_features(args) -> int:
    cfg = _load_config(args)
    wave = audio.read_wav(args.infile)
    feats = audio.extract_features(wave, cfg.frontend)
    audio.save_features(args.out, feats)
    _emit(args, {"frames": feats.num_frames, "dim": feats.dim,
                 "frame_rate": feats.frame_rate, "config_hash": cfg.frontend.config_hash},
          f"{feats.num_frames} frames x {feats.dim} mel bins at {feats.frame_rate:g} Hz")
    return 0


def _cmd_codebook_train(args) -> int:
    cfg = _load_config(args)
    k = args.k or cfg.codebook.k
    corpus = [audio.load_features(p) for p in args.features]
    cb = quantizer.train_codebook(
        corpus, k=k, max_iters=cfg.codebook.max_iters, tol=cfg.codebook.tol, seed=cfg.seed
    )
    quantizer.save_codebook(args.out, cb, config_hash=cfg.config_hash)
    _emit(args, {"k": cb.k, "dim": cb.dim, "train_distortion": cb.train_distortion,
                 "codebook_id": cb.codebook_id},
          f"codebook K={cb.k} D={cb.dim} distortion={cb.train_distortion:.6g}")
    return 0


def _cmd_tokenize(args) -> int:
    cfg = _load_config(args)
    cb = quantizer.load_codebook(args.codebook)
    if args.infile.endswith(".wav"):
        feats = audio.extract_features(audio.read_wav(args.infile), cfg.frontend)
    else:
        feats = audio.load_features(args.infile)
    tokens = quantizer.tokenize(feats, cb)
    if args.out:
        _write_jsonl(
            args.out,
            [{"tokens": [int(t) for t in tokens.tokens],
              "token_rate": tokens.token_rate, "codebook_id": tokens.codebook_id}],
            "TFTOK1",
            cfg.config_hash,
        )
    _emit(args, {"tokens": len(tokens), "token_rate": tokens.token_rate},
          f"{len(tokens)} tokens at {tokens.token_rate:g} Hz")
    return 0


def _cmd_vocab_build(args) -> int:
    cfg = _load_config(args)
    t = args.t or cfg.vocab.t
    a = args.a or cfg.vocab.a
    joint = vocab_mod.build_joint_vocab(t=t, a=a)
    vocab_mod.save_vocab(args.out, joint)
    _emit(args, {"t": joint.t, "a": joint.a, "total": joint.total},
          f"vocabulary t={joint.t} a={joint.a} total={joint.total}")
    return 0


def _cmd_surgery(args) -> int:
    ckpt = model.load_checkpoint(args.infile)
    expanded = model.surgery(ckpt, args.audio_vocab)
    model.save_checkpoint(args.out, expanded, config_hash=args.config_hash)
    cfg = expanded.config
    _emit(args, {"t": cfg.vocab_text, "a": cfg.vocab_audio, "m": cfg.d_model},
          f"(t={cfg.vocab_text}, a={cfg.vocab_audio}, m={cfg.d_model})")
    return 0


def _cmd_synth_generate(args) -> int:
    spec = synth.make_language_pair(
        n_words=args.words, seed=args.seed, codebook_size=args.codebook_size
    )
    records = synth.generate_corpus(spec, args.sentences, max_words=args.max_words,
                                    dataset_id=args.dataset_id)
    _write_jsonl(args.out, [mixture.record_to_json(r) for r in records],
                 "TFMAN1", f"synth-seed-{args.seed}")
    if args.spec_out:
        synth.save_spec(args.spec_out, spec)
    if args.codebook_out:
        quantizer.save_codebook(args.codebook_out, spec.codebook)
    _emit(args, {"records": len(records), "codebook_k": spec.codebook.k,
                 "dataset_id": args.dataset_id},
          f"{len(records)} records ({spec.codebook.k}-token codebook)")
    return 0


def _cmd_mix(args) -> int:
    spec = mixture.load_mixture_spec(args.spec)
    if args.mix_command == "stats":
        store = _store_from_args(args.manifest) if args.manifest else None
        stats = mixture.mixture_stats(spec, store)
        if args.json:
            print(json.dumps(stats))
        else:
            for comp in stats["components"]:
                extra = f" serializable={comp['serializable']}" if "serializable" in comp else ""
                print(f"{comp['dataset_id']:>16} {' '.join(comp['chain']):>14} "
                      f"count={comp['count']:<7} p={comp['probability']:.4f}{extra}")
            for task, count in stats["per_task_counts"].items():
                print(f"task {task}: {count} examples")
        return 0
    store = _store_from_args(args.manifest)
    joint = vocab_mod.load_vocab(args.vocab)
    stream = mixture.build_stream(spec, store, joint)
    out = []
    for _ in range(args.count):
        ex = next(stream)
        out.append({
            "ids": [int(i) for i in ex.ids],
            "loss_mask": [int(m) for m in ex.loss_mask],
            "stage_spans": [[s, int(a), int(b)] for s, a, b in ex.stage_spans],
            "tag": vocab_mod.render_tag(ex.task),
        })
    _write_jsonl(args.out, out, "TFEX1", f"mixture-seed-{spec.seed}")
    _emit(args, {"examples": len(out)}, f"wrote {len(out)} examples")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    store = _store_from_args(args.manifest)
    joint = vocab_mod.load_vocab(args.vocab)
    mix_spec = mixture.load_mixture_spec(args.mixture)
    stream = mixture.build_stream(mix_spec, store, joint)
    if args.init:
        ckpt = model.load_checkpoint(args.init)
    else:
        mc = cfg.model
        ckpt = model.init_model(
            model.ModelConfig(
                layers=mc.layers, d_model=mc.d_model, n_heads=mc.n_heads,
                d_ff=mc.d_ff, max_len=mc.max_len, dropout=mc.dropout,
                vocab_text=joint.t, vocab_audio=0,
            ),
            seed=cfg.seed,
        )
        ckpt = model.surgery(ckpt, joint.a)
    tc = training.TrainConfig(
        batch_size=cfg.training.batch_size,
        seed=cfg.seed,
        schedule=cfg.training.lr_schedule(),
        log_every=cfg.training.log_every,
    )
    trained, log = training.train(ckpt, stream, tc, steps=args.steps or cfg.training.steps)
    model.save_checkpoint(args.out, trained, config_hash=cfg.config_hash)
    if args.metrics:
        header = [{"_magic": "TFLOG1", "_config_hash": cfg.config_hash}]
        training.save_metrics_log(args.metrics, header + log)
    last = log[-1]["loss"] if log else float("nan")
    _emit(args, {"steps": trained.step, "final_loss": last},
          f"trained to step {trained.step}, final loss {last:.4f}")
    return 0


def _cmd_decode(args) -> int:
    ckpt = model.load_checkpoint(args.ckpt)
    joint = vocab_mod.load_vocab(args.vocab)
    tag = vocab_mod.parse_tag_text(args.tag)
    prefix = list(joint.encode_text(args.tag if args.raw_tag else vocab_mod.render_tag(tag)))
    if args.audio:
        _, records = _read_jsonl(args.audio)
        tokens = records[args.index]["tokens"]
        prefix += [joint.t + int(t) for t in tokens]
    elif args.text:
        prefix += joint.encode_text(" " + args.text)
    else:
        raise UsageError("decode needs --audio or --text input")
    out = model.decode(
        ckpt, prefix, max_new=args.max_new,
        strategy="temperature" if args.temperature > 0 else "greedy",
        temperature=args.temperature, seed=args.seed, eos_id=joint.eos_id,
    )
    stages = vocab_mod.parse_stages(out.continuation, joint, expected=tag.chain)
    payload = {"stages": [], "stop_reason": out.stop_reason}
    lines = []
    for st in stages:
        if any(joint.is_audio_id(int(i)) for i in st.ids):
            toks = [int(i) - joint.t for i in st.ids]
            payload["stages"].append({"stage": st.stage, "audio_tokens": toks})
            lines.append(f"[{st.stage}] <{len(toks)} audio tokens>")
        else:
            text = st.text(joint)
            payload["stages"].append({"stage": st.stage, "text": text})
            lines.append(f"[{st.stage}] {text}")
    _emit(args, payload, "\n".join(lines))
    return 0


def _cmd_eval(args) -> int:
    if args.metric == "asr-bleu":
        spec = synth.load_spec(args.synth_spec)
        items = metrics.load_eval_pairs(args.pairs, audio=True)
        corpus = metrics.EvalCorpus(items, language=args.language)
        score = metrics.asr_bleu(corpus, synth.oracle_transcriber(spec))
        name = "asr_bleu"
    else:
        items = metrics.load_eval_pairs(args.pairs)
        corpus = metrics.EvalCorpus(items, language=args.language)
        if args.metric == "bleu":
            score, name = metrics.corpus_bleu(corpus), "bleu"
        elif args.metric == "wer":
            score, name = metrics.wer(corpus), "wer"
        else:
            score, name = metrics.cer(corpus), "cer"
    report = metrics.make_report(corpus, {name: score})
    if args.report:
        metrics.save_report(args.report, report)
    _emit(args, report, f"{name} = {score:.4f} over {len(corpus)} pairs")
    return 0


def _cmd_ablate(args) -> int:
    sc = SuiteConfig(seeds=tuple(args.seeds))
    if args.steps:
        sc.steps = args.steps
    report = run_suite(args.suite, sc)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, indent=2)
            f.write("\n")
    if args.json:
        print(json.dumps(report.to_dict()))
    else:
        print(report.table())
    return 0


def _verify_one(path) -> dict:
    with open(path, "rb") as f:
        head = f.read(4)
    if head == audio.FEATURE_MAGIC:
        feats = audio.load_features(path)
        return {"path": str(path), "kind": "features", "frames": feats.num_frames,
                "config_hash": feats.config_hash, "ok": True}
    if head == quantizer.CODEBOOK_MAGIC:
        cb = quantizer.load_codebook(path)
        return {"path": str(path), "kind": "codebook", "k": cb.k,
                "codebook_id": cb.codebook_id, "ok": True}
    if head == model.CHECKPOINT_MAGIC:
        ckpt = model.load_checkpoint(path)
        return {"path": str(path), "kind": "checkpoint", "step": ckpt.step, "ok": True}
    text = head.decode("utf-8", errors="ignore")
    if text.startswith("toke"):
        vocab_mod.load_vocab(path)
        return {"path": str(path), "kind": "vocabulary", "ok": True}
    if text.startswith("{"):
        header, records = _read_jsonl(path)
        kind = header.get("_magic", "jsonl")
        if kind == "TFMAN1":
            for obj in records:
                mixture.record_from_json(obj)
        return {"path": str(path), "kind": kind,
                "config_hash": header.get("_config_hash", ""), "records": len(records),
                "ok": True}
    raise ValueError(f"unrecognized artifact {path}")


def _cmd_verify(args) -> int:
    results = [_verify_one(p) for p in args.paths]
    if args.json:
        print(json.dumps(results))
    else:
        for r in results:
            print(f"{r['path']}: {r['kind']} OK")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="tokenfuse", description=__doc__)
    parser.add_argument("--json", action="store_true", help="machine-readable reports")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", help="WAV -> log-mel feature container")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_features)

    p = sub.add_parser("codebook", help="codebook operations")
    csub = p.add_subparsers(dest="codebook_command", required=True)
    pt = csub.add_parser("train", help="fit a k-means codebook over feature files")
    pt.add_argument("--features", nargs="+", required=True)
    pt.add_argument("--k", type=int)
    pt.add_argument("--out", required=True)
    pt.add_argument("--config")
    pt.add_argument("--seed", type=int, default=0)
    pt.set_defaults(fn=_cmd_codebook_train)

    p = sub.add_parser("tokenize", help="WAV or features -> audio tokens")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_tokenize)

    p = sub.add_parser("vocab", help="vocabulary operations")
    vsub = p.add_subparsers(dest="vocab_command", required=True)
    pv = vsub.add_parser("build", help="build the joint text+audio vocabulary")
    pv.add_argument("--t", type=int)
    pv.add_argument("--a", type=int)
    pv.add_argument("--out", required=True)
    pv.add_argument("--config")
    pv.add_argument("--seed", type=int, default=0)
    pv.set_defaults(fn=_cmd_vocab_build)

    p = sub.add_parser("surgery", help="add zero audio rows to a text checkpoint")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--audio-vocab", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config-hash", default="")
    p.set_defaults(fn=_cmd_surgery)

    p = sub.add_parser("synth", help="synthetic corpus operations")
    ssub = p.add_subparsers(dest="synth_command", required=True)
    pg = ssub.add_parser("generate", help="generate a paired speech-text corpus")
    pg.add_argument("--seed", type=int, default=0)
    pg.add_argument("--words", type=int, default=16)
    pg.add_argument("--codebook-size", type=int, default=64)
    pg.add_argument("--sentences", type=int, default=256)
    pg.add_argument("--max-words", type=int, default=4)
    pg.add_argument("--dataset-id", default="synth")
    pg.add_argument("--out", required=True)
    pg.add_argument("--spec-out")
    pg.add_argument("--codebook-out")
    pg.set_defaults(fn=_cmd_synth_generate)

    p = sub.add_parser("mix", help="mixture operations")
    p.add_argument("mix_command", choices=["build", "stats"])
    p.add_argument("--spec", required=True)
    p.add_argument("--manifest", nargs="*", metavar="ID=PATH")
    p.add_argument("--vocab")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_mix)

    p = sub.add_parser("train", help="train on a mixture stream")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mixture", required=True)
    p.add_argument("--manifest", nargs="+", required=True, metavar="ID=PATH")
    p.add_argument("--vocab", required=True)
    p.add_argument("--init", help="checkpoint to continue from (else fresh init+surgery)")
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("decode", help="autoregressive decoding from a task prompt")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--tag", required=True)
    p.add_argument("--raw-tag", action="store_true",
                   help="feed --tag text verbatim instead of the rendered form")
    p.add_argument("--audio", help="token file for audio input")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--text", help="text input for TTS/MT tasks")
    p.add_argument("--max-new", type=int, default=64)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_decode)

    p = sub.add_parser("eval", help="score hypothesis/reference pairs")
    p.add_argument("metric", choices=["bleu", "wer", "cer", "asr-bleu"])
    p.add_argument("--pairs", required=True)
    p.add_argument("--language", default="English")
    p.add_argument("--synth-spec", help="language spec for the oracle transcriber")
    p.add_argument("--report")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("ablate", help="run a toy-scale ablation suite")
    p.add_argument("--suite", required=True,
                   choices=["multitask", "init", "combined", "s2st", "tokens"])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--steps", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("verify", help="re-validate artifacts against their invariants")
    p.add_argument("paths", nargs="+")
    p.set_defaults(fn=_cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except UsageError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - boundary: report and set exit code
        print(json.dumps({"error": "data", "message": str(exc)}), file=sys.stderr)
        return 2


cli_main = main

if __name__ == "__main__":
    sys.exit(main())
