"""Single executable wiring data generation, training, evaluation, generation
and serving. Every subcommand honors --seed and reproduces its artifacts
byte-for-byte under an identical invocation.

Exit codes: 0 success, 1 usage or validation error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import (
    CorpusConfig,
    DataError,
    DEFAULT_REGISTRIES,
    DialogueContext,
    Persona,
    Registries,
    TemplateBanks,
    Utterance,
    corpus_character_stream,
    default_persona,
    generate_corpus,
    generate_pretrain_text,
    load_jsonl,
    save_jsonl,
    split_corpus,
)
from .decoding import DecodeConfig, DecodeError, alpha_sweep, generate
from .gradcheck import gradient_check
from .metrics import MetricsError, evaluate
from .model import (
    DialogueModel,
    LanguageModel,
    ModelConfig,
    ModelError,
    init_from_lm_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import NumericsError
from .text import build_vocab, load_vocab, save_vocab
from .training import TrainConfig, TrainingError, finetune, pretrain


class ConfigError(ValueError):
    pass


_MODEL_KEYS = ("n_blocks", "n_heads", "d_model", "d_ff", "context_window", "merge_variant", "dropout")
_CORPUS_KEYS = (
    "n_dialogues", "persona_density", "seed", "prompted_fraction",
    "locations", "tags", "n_valid", "n_test_random", "n_test_biased",
    "pretrain_min_chars",
)
_TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))
_DECODE_KEYS = ("strategy", "k", "temperature", "max_tokens", "seed")
_SERVE_KEYS = ("port", "cors_origin", "session_ttl_seconds")


@dataclass
class RunConfig:
    """Validated, merged view of all sub-configs plus file paths."""

    model: dict = field(default_factory=dict)
    corpus: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    decode: dict = field(default_factory=dict)
    serve: dict = field(default_factory=dict)
    out: Path = Path("runs/desk")

    @staticmethod
    def load(config_path: str | None, seed: int | None = None, out: str | None = None) -> "RunConfig":
        raw = {}
        if config_path:
            path = Path(config_path)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            raw = json.loads(path.read_text(encoding="utf-8"))
        known_sections = {"model", "corpus", "train", "decode", "serve", "out"}
        unknown = set(raw) - known_sections
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = RunConfig(
            model=dict(raw.get("model", {})),
            corpus=dict(raw.get("corpus", {})),
            train=dict(raw.get("train", {})),
            decode=dict(raw.get("decode", {})),
            serve=dict(raw.get("serve", {})),
            out=Path(out or raw.get("out", "runs/desk")),
        )
        for name, section, allowed in (
            ("model", cfg.model, _MODEL_KEYS),
            ("corpus", cfg.corpus, _CORPUS_KEYS),
            ("train", cfg.train, _TRAIN_KEYS),
            ("decode", cfg.decode, _DECODE_KEYS),
            ("serve", cfg.serve, _SERVE_KEYS),
        ):
            bad = set(section) - set(allowed)
            if bad:
                raise ConfigError(f"unknown keys in config section {name!r}: {sorted(bad)}")
        if seed is not None:
            cfg.corpus["seed"] = seed
            cfg.train["seed"] = seed
            cfg.decode["seed"] = seed
        return cfg

    def registries(self) -> Registries:
        return Registries(
            locations=tuple(self.corpus.get("locations", DEFAULT_REGISTRIES.locations)),
            tags=tuple(self.corpus.get("tags", DEFAULT_REGISTRIES.tags)),
        )

    def corpus_config(self) -> CorpusConfig:
        return CorpusConfig(
            n_dialogues=int(self.corpus.get("n_dialogues", 9100)),
            persona_density=float(self.corpus.get("persona_density", 0.162)),
            seed=int(self.corpus.get("seed", 0)),
            registries=self.registries(),
            banks=TemplateBanks(),
            prompted_fraction=float(self.corpus.get("prompted_fraction", 0.75)),
        )

    def split_sizes(self) -> tuple[int, int, int]:
        return (
            int(self.corpus.get("n_valid", 500)),
            int(self.corpus.get("n_test_random", 500)),
            int(self.corpus.get("n_test_biased", 100)),
        )

    def model_config(self, vocab_size: int, registries: Registries) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            n_genders=len(registries.genders),
            n_locations=len(registries.locations),
            n_tags=len(registries.tags),
            **self.model,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)

    def decode_config(self, alpha: float | None = None) -> DecodeConfig:
        return DecodeConfig(alpha=alpha, **self.decode)


def _load_dialogue_checkpoint(path: str | None):
    if not path:
        raise ConfigError("--init-from CHECKPOINT is required for this command")
    if not Path(path).exists():
        raise ConfigError(f"checkpoint not found: {path}")
    model = load_checkpoint(path)
    if model.kind != "dialogue":
        raise ConfigError(f"{path} is a {model.kind} checkpoint, expected a fine-tuned model")
    return model


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_datagen(args, cfg: RunConfig) -> int:
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    ccfg = cfg.corpus_config()
    examples = generate_corpus(ccfg)
    n_valid, n_rand, n_biased = cfg.split_sizes()
    splits = split_corpus(examples, ccfg.seed, n_valid, n_rand, n_biased)
    pre_text = generate_pretrain_text(
        seed=ccfg.seed + 1,
        min_chars=int(cfg.corpus.get("pretrain_min_chars", 1_100_000)),
        registries=ccfg.registries,
    )
    vocab = build_vocab(corpus_character_stream(examples, pre_text), max_size=13084)
    for name, part in splits.as_dict().items():
        save_jsonl(part, out / f"{name}.jsonl")
    (out / "pretrain.txt").write_text(pre_text, encoding="utf-8", newline="\n")
    save_vocab(vocab, out / "vocab.txt")
    labeled = sum(ex.persona_label for ex in examples)
    print(
        f"wrote {len(examples)} dialogues to {out} "
        f"(train {len(splits.train)}, valid {len(splits.valid)}, "
        f"test_random {len(splits.test_random)}, test_biased {len(splits.test_biased)})"
    )
    print(
        f"persona-revealing fraction: {labeled / len(examples):.4f} "
        f"(target {ccfg.persona_density}); vocabulary size {len(vocab)}"
    )
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    text_path = out / "pretrain.txt"
    if not text_path.exists():
        raise ConfigError(f"missing pretraining text: {text_path} (run datagen first)")
    text = text_path.read_text(encoding="utf-8")
    vocab = load_vocab(out / "vocab.txt")
    reg = cfg.registries()
    tcfg = cfg.train_config()
    if args.init_from:
        model = load_checkpoint(args.init_from)
        if model.kind != "lm":
            raise ConfigError("pretraining resumes only from an lm checkpoint")
    else:
        model = LanguageModel(cfg.model_config(len(vocab), reg), vocab, seed=tcfg.seed)
    t0 = time.time()
    pretrain(model, text, tcfg, report_path=out / "pretrain_report.jsonl", log=_stderr)
    save_checkpoint(model, out / "lm.ckpt")
    print(f"pretrained {tcfg.epochs_pretrain} epochs in {time.time() - t0:.1f}s -> {out / 'lm.ckpt'}")
    return 0


def cmd_finetune(args, cfg: RunConfig) -> int:
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "valid"):
        if not (out / f"{name}.jsonl").exists():
            raise ConfigError(f"missing split file: {out / (name + '.jsonl')} (run datagen first)")
    train = load_jsonl(out / "train.jsonl")
    valid = load_jsonl(out / "valid.jsonl")
    vocab = load_vocab(out / "vocab.txt")
    reg = cfg.registries()
    tcfg = cfg.train_config()
    if args.init_from and Path(args.init_from).exists():
        header_kind = load_checkpoint(args.init_from).kind
    elif args.init_from:
        raise ConfigError(f"checkpoint not found: {args.init_from}")
    else:
        header_kind = None
        print("warning: no --init-from checkpoint given, training from scratch", file=sys.stderr)
    model = DialogueModel(cfg.model_config(len(vocab), reg), vocab, reg, seed=tcfg.seed)
    if header_kind == "lm":
        init_from_lm_checkpoint(model, args.init_from)
    elif header_kind == "dialogue":
        model = _load_dialogue_checkpoint(args.init_from)
    t0 = time.time()
    finetune(model, train, valid, tcfg, report_path=out / "finetune_report.jsonl", log=_stderr)
    save_checkpoint(model, out / "dialogue.ckpt")
    print(
        f"finetuned {tcfg.epochs_finetune} epochs in {time.time() - t0:.1f}s -> {out / 'dialogue.ckpt'}"
    )
    return 0


def _parse_persona(raw: str | None, registries: Registries) -> Persona:
    if not raw:
        return default_persona(registries)
    obj = json.loads(raw)
    persona = Persona.from_json(obj)
    registries.validate(persona)
    return persona


def cmd_generate(args, cfg: RunConfig) -> int:
    model = _load_dialogue_checkpoint(args.init_from)
    persona = _parse_persona(args.persona, model.registries)
    if not args.context:
        raise ConfigError("--context TEXT is required")
    speaker = default_persona(model.registries)
    turns = tuple(
        (Utterance(f"u{i}", text), speaker) for i, text in enumerate(args.context)
    )
    dcfg = cfg.decode_config(alpha=args.alpha)
    gen = generate(model, DialogueContext(turns), persona, dcfg)
    tag = "predicted" if gen.alpha_used.source == "predicted" else "fixed"
    print(gen.response)
    print(f"alpha={gen.alpha_used.alpha:.4f} ({tag})")
    return 0


_SPLIT_FILES = {"random": "test_random.jsonl", "biased": "test_biased.jsonl", "valid": "valid.jsonl"}


def cmd_eval(args, cfg: RunConfig) -> int:
    model = _load_dialogue_checkpoint(args.init_from)
    split_file = _SPLIT_FILES.get(args.split)
    if split_file is None:
        raise ConfigError(f"unknown split {args.split!r}; choose from {sorted(_SPLIT_FILES)}")
    path = cfg.out / split_file
    if not path.exists():
        raise ConfigError(f"missing split file: {path}")
    examples = load_jsonl(path)
    cfg.out.mkdir(parents=True, exist_ok=True)
    if args.alpha_grid:
        grid = [float(x) for x in args.alpha_grid.split(",") if x != ""]
        rows = []
        for alpha in grid:
            report = evaluate(model, examples, cfg.decode_config(alpha=alpha), args.split)
            report.save(cfg.out / f"eval_{args.split}_alpha{alpha:g}.json")
            rows.append({"alpha": alpha, **report.metrics})
            print(f"alpha={alpha:g}: {report.metrics}")
        summary = cfg.out / f"sweep_{args.split}.json"
        summary.write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
        print(f"sweep summary -> {summary}")
    else:
        report = evaluate(model, examples, cfg.decode_config(alpha=args.alpha), args.split)
        tag = "pred" if args.alpha is None else f"alpha{args.alpha:g}"
        report.save(cfg.out / f"eval_{args.split}_{tag}.json")
        print(f"{args.split}: {report.metrics}")
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .text import Vocab

    alphabet = "abcdefghijklmnopqrstuvwxyz ?!.,;:'-"
    vocab = Vocab.from_tokens(alphabet)
    reg = Registries(locations=("ashvale", "brimford"), tags=("chess", "hiking", "baking"))
    mcfg = ModelConfig(
        vocab_size=len(vocab), n_blocks=2, n_heads=2, d_model=8, d_ff=16,
        context_window=48, n_genders=3, n_locations=2, n_tags=3,
    )
    model = DialogueModel(mcfg, vocab, reg, seed=cfg.train.get("seed", 0), dtype=np.float64)
    p1 = Persona("female", "ashvale", ("chess",))
    p2 = Persona("male", "brimford", ())
    from .data import TrainingExample

    examples = [
        TrainingExample(
            DialogueContext(((Utterance("a", "where do you live ?"), p2),)),
            p1, "i live in ashvale .", 1,
        ),
        TrainingExample(
            DialogueContext(((Utterance("b", "hey !"), p1), (Utterance("a", "how are you ?"), p2))),
            p2, "not too bad .", 0,
        ),
    ]
    t0 = time.time()
    results = gradient_check(model, examples, TrainConfig(seed=1), corrupt=args.corrupt)
    elapsed = time.time() - t0
    n_fail = 0
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{status:4s} {r.name:24s} max rel err {r.max_rel_err:.3e}")
        n_fail += 0 if r.passed else 1
    print(f"{len(results) - n_fail}/{len(results)} parameters passed in {elapsed:.1f}s")
    if n_fail:
        print(f"gradient check FAILED for {n_fail} parameters", file=sys.stderr)
        return 2
    return 0


def cmd_serve(args, cfg: RunConfig) -> int:
    from .serve import ChatService, run_server

    model = _load_dialogue_checkpoint(args.init_from)
    service = ChatService(
        model,
        checkpoint_id=Path(args.init_from).name,
        session_ttl_seconds=float(cfg.serve.get("session_ttl_seconds", 3600.0)),
        cors_origin=cfg.serve.get("cors_origin", "*"),
        decode_config=cfg.decode_config(),
    )
    port = args.port or int(cfg.serve.get("port", 8765))
    print(f"serving on http://127.0.0.1:{port}")
    run_server(service, port)
    return 0


def _stderr(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="personaroute",
        description="persona-conditioned dialogue model with a routed decoder",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override every configured seed")
        p.add_argument("--out", default=None, help="work directory (data, checkpoints, reports)")

    p = sub.add_parser("datagen", help="generate the synthetic corpus, splits and vocabulary")
    common(p)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("pretrain", help="train the language model on the pretraining text")
    common(p)
    p.add_argument("--init-from", default=None, help="resume from an lm checkpoint")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune the dialogue model")
    common(p)
    p.add_argument("--init-from", default=None, help="lm checkpoint (or dialogue checkpoint to resume)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("generate", help="generate one response")
    common(p)
    p.add_argument("--init-from", required=False, default=None, help="dialogue checkpoint")
    p.add_argument("--context", action="append", default=None, help="context utterance (repeatable)")
    p.add_argument("--persona", default=None, help='persona JSON, e.g. {"gender":"female",...}')
    p.add_argument("--alpha", type=float, default=None, help="fixed persona weight in [0,1]")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="evaluate a test split")
    common(p)
    p.add_argument("--init-from", default=None, help="dialogue checkpoint")
    p.add_argument("--split", default="random", help="random | biased | valid")
    p.add_argument("--alpha", type=float, default=None, help="fixed persona weight")
    p.add_argument("--alpha-grid", default=None, help="comma-separated persona weights")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    common(p)
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("serve", help="HTTP chat service")
    common(p)
    p.add_argument("--init-from", default=None, help="dialogue checkpoint")
    p.add_argument("--port", type=int, default=None)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, seed=args.seed, out=args.out)
        alpha = getattr(args, "alpha", None)
        if alpha is not None and not 0.0 <= alpha <= 1.0:
            raise ConfigError(f"--alpha {alpha} outside [0, 1]")
        return args.func(args, cfg)
    except (ConfigError, DataError, DecodeError, MetricsError, ModelError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, NumericsError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
