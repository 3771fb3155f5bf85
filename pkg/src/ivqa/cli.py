"""Single executable covering the whole pipeline: synthetic data, vocabulary
building, training, generation, evaluation, and gradient verification.

Run configuration is a flat ``key = value`` file (``#`` comments) merged with
``--set key=value`` overrides; flags win.  Exit codes: 0 success,
1 verification failure, 2 usage or IO error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import features as fio
from . import gradcheck as gc
from . import inference, metrics, textdata, training
from .model import FeatureTensors, Model, ModelConfig, ModelParameters
from .textdata import Vocabulary


class CliError(Exception):
    """User-facing failure: bad input, bad config, missing file."""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_optional_float(text: str):
    low = text.strip().lower()
    if low in ("none", "off", ""):
        return None
    return float(text)


# every recognized config key and its parser; unknown keys are an error
_SCHEMA = {
    "vocab_size": int,
    "hidden_size": int,
    "attention_size": int,
    "visual_dim": int,
    "embed_dim": int,
    "regions": int,
    "mfb_expand": int,
    "mfb_pool": int,
    "max_question_len": int,
    "answer_len": int,
    "ablate_semantic": _parse_bool,
    "batch_size": int,
    "epochs": int,
    "lr_initial": float,
    "lr_after": float,
    "lr_drop_epoch": int,
    "seed": int,
    "adam_beta1": float,
    "adam_beta2": float,
    "adam_eps": float,
    "clip_norm": _parse_optional_float,
    "workers": int,
    "precision": int,
}

_MODEL_KEYS = (
    "vocab_size",
    "hidden_size",
    "attention_size",
    "visual_dim",
    "embed_dim",
    "regions",
    "mfb_expand",
    "mfb_pool",
    "max_question_len",
    "answer_len",
    "ablate_semantic",
)
_TRAIN_KEYS = (
    "batch_size",
    "epochs",
    "lr_initial",
    "lr_after",
    "lr_drop_epoch",
    "seed",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "clip_norm",
    "workers",
)


def parse_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise CliError(f"{path}:{lineno}: expected 'key = value', got {line.rstrip()!r}")
            key, value = (part.strip() for part in body.split("=", 1))
            values[key] = value
    return values


@dataclass
class RunConfig:
    """Validated, typed view of the config file plus flag overrides."""

    values: dict[str, object] = field(default_factory=dict)

    @classmethod
    def build(cls, config_path, set_overrides, flag_overrides=None) -> "RunConfig":
        raw: dict[str, str] = {}
        if config_path:
            raw.update(parse_config_file(config_path))
        for item in set_overrides or []:
            if "=" not in item:
                raise CliError(f"--set expects key=value, got {item!r}")
            key, value = (part.strip() for part in item.split("=", 1))
            raw[key] = value
        typed: dict[str, object] = {}
        for key, text in raw.items():
            parser = _SCHEMA.get(key)
            if parser is None:
                raise CliError(f"unknown config key {key!r}")
            try:
                typed[key] = parser(text)
            except ValueError as exc:
                raise CliError(f"config key {key}: {exc}") from None
        for key, value in (flag_overrides or {}).items():
            if value is not None:
                typed[key] = value
        return cls(values=typed)

    def model_config(self, vocab_size: int | None = None) -> ModelConfig:
        kwargs = {k: v for k, v in self.values.items() if k in _MODEL_KEYS}
        if vocab_size is not None:
            if "vocab_size" in kwargs and kwargs["vocab_size"] != vocab_size:
                raise CliError(
                    f"config vocab_size={kwargs['vocab_size']} but the vocabulary "
                    f"file has {vocab_size} tokens"
                )
            kwargs["vocab_size"] = vocab_size
        if "vocab_size" not in kwargs:
            raise CliError("vocab_size is required (usually derived from --vocab)")
        try:
            return ModelConfig(**kwargs)
        except ValueError as exc:
            raise CliError(str(exc)) from None

    def train_config(self) -> training.TrainConfig:
        kwargs = {k: v for k, v in self.values.items() if k in _TRAIN_KEYS}
        try:
            return training.TrainConfig(**kwargs)
        except ValueError as exc:
            raise CliError(str(exc)) from None

    @property
    def precision(self) -> int:
        return int(self.values.get("precision", 32))


def _echo_config(model_cfg: ModelConfig, train_cfg: training.TrainConfig) -> None:
    from dataclasses import asdict

    print("# effective configuration")
    for key, value in asdict(model_cfg).items():
        print(f"{key} = {value}")
    for key, value in asdict(train_cfg).items():
        print(f"{key} = {value}")


def _require_files(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise CliError(f"input file not found: {p}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_build_vocab(args) -> int:
    _require_files(args.data)
    raw = textdata.load_dataset(args.data)
    vocab, kept = textdata.build_vocabulary(raw, args.answer_top)
    out = Path(args.out)
    out_data = Path(args.out_data) if args.out_data else out.with_suffix(".filtered.jsonl")
    vocab.save(out)
    textdata.save_dataset(out_data, kept)
    print(f"vocabulary: {len(vocab)} tokens -> {out}")
    print(f"filtered dataset: {len(kept)} of {len(raw)} instances -> {out_data}")
    return 0


def cmd_synth(args) -> int:
    features_path, dataset_path = textdata.synth_dataset(
        args.out_dir,
        seed=args.seed,
        n_images=args.images,
        k=args.k,
        d_v=args.dv,
        qa_per_image=args.qa,
    )
    print(f"features -> {features_path}")
    print(f"dataset  -> {dataset_path}")
    return 0


def cmd_train(args) -> int:
    _require_files(args.data, args.features, args.vocab, args.emb, args.config)
    rc = RunConfig.build(args.config, args.set, {"seed": args.seed})
    if args.ablate:
        rc.values["ablate_semantic"] = True
    vocab = Vocabulary.load(args.vocab)
    model_cfg = rc.model_config(vocab_size=len(vocab))
    train_cfg = rc.train_config()
    _echo_config(model_cfg, train_cfg)
    if args.dry_run:
        return 0

    ad.set_precision(rc.precision)
    raw = textdata.load_dataset(args.data)
    instances = [
        textdata.make_instance(rec, vocab, model_cfg.max_question_len, model_cfg.answer_len)
        for rec in raw
    ]
    feature_sets = fio.load_features(
        args.features, expected_k=model_cfg.regions, expected_d_v=model_cfg.visual_dim
    )
    emb = textdata.load_embeddings(args.emb, vocab, model_cfg.embed_dim, seed=train_cfg.seed)

    def progress(stat: training.EpochStats):
        print(f"epoch {stat.epoch} lr {stat.lr:g} loss {stat.mean_loss:.6f}")

    ckpt, stats = training.train(
        instances, feature_sets, model_cfg, train_cfg, emb, vocab, progress
    )
    training.save_checkpoint(args.out, ckpt)
    loss_log = args.loss_log or str(Path(args.out).with_suffix(".loss.csv"))
    training.write_loss_log(loss_log, stats, clip_norm=train_cfg.clip_norm)
    print(f"checkpoint -> {args.out}")
    print(f"loss log   -> {loss_log}")
    return 0


def _load_model(ckpt_path, vocab_path):
    ckpt = training.load_checkpoint(ckpt_path)
    vocab = Vocabulary.load(vocab_path)
    if len(vocab) != ckpt.config.vocab_size:
        raise CliError(
            f"vocabulary has {len(vocab)} tokens but the checkpoint was trained "
            f"with {ckpt.config.vocab_size}"
        )
    params = ckpt.to_parameters()
    return ckpt, vocab, Model(ckpt.config, params)


def cmd_generate(args) -> int:
    _require_files(args.ckpt, args.features, args.input, args.vocab, args.emb)
    ad.set_precision(32)
    ckpt, vocab, model = _load_model(args.ckpt, args.vocab)
    cfg = ckpt.config
    try:
        feature_sets = fio.load_features(
            args.features, expected_k=cfg.regions, expected_d_v=cfg.visual_dim
        )
    except ValueError as exc:
        raise CliError(f"checkpoint/feature mismatch: {exc}") from None
    emb = textdata.load_embeddings(args.emb, vocab, cfg.embed_dim, seed=ckpt.seed)

    requests = []
    with open(args.input, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "image_id" not in rec or "answer" not in rec:
                raise CliError(f"{args.input}:{lineno}: needs image_id and answer")
            requests.append((str(rec["image_id"]), str(rec["answer"])))

    feats_cache: dict[str, FeatureTensors] = {}
    out_fh = open(args.out, "w", encoding="utf-8", newline="\n") if args.out else sys.stdout
    trace_fh = (
        open(args.trace, "w", encoding="utf-8", newline="\n") if args.trace else None
    )
    try:
        for image_id, answer in requests:
            rfs = feature_sets.get(image_id)
            if rfs is None:
                raise CliError(f"no features for image_id {image_id!r}")
            if image_id not in feats_cache:
                semantic = None
                if not cfg.ablate_semantic:
                    semantic = fio.assemble_semantic(rfs, emb).S
                feats_cache[image_id] = FeatureTensors.from_arrays(
                    cfg, rfs.features, semantic
                )
            answer_ids, _ = textdata.encode_sequence(
                textdata.tokenize(answer), cfg.answer_len, vocab
            )
            results = inference.beam_decode(
                model,
                vocab,
                feats_cache[image_id],
                answer_ids,
                beam=args.beam,
                top_n=args.top,
                mask_unk=not args.allow_unk,
            )
            for result in results:
                inference.write_generation(out_fh, image_id, answer, result)
            if trace_fh is not None and results:
                inference.write_trace(trace_fh, vocab, results[0])
    finally:
        if out_fh is not sys.stdout:
            out_fh.close()
        if trace_fh is not None:
            trace_fh.close()
    return 0


def cmd_evaluate(args) -> int:
    _require_files(args.generated, args.gold)
    report = metrics.evaluate_corpus(args.generated, args.gold)
    payload = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    print(payload)
    if args.out:
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
    return 0


def cmd_gradcheck(args) -> int:
    overrides = {}
    if args.config:
        _require_files(args.config)
        rc = RunConfig.build(args.config, args.set)
        overrides = {k: v for k, v in rc.values.items() if k in _MODEL_KEYS}
    elif args.set:
        rc = RunConfig.build(None, args.set)
        overrides = {k: v for k, v in rc.values.items() if k in _MODEL_KEYS}
    cfg = gc.tiny_config(**overrides)
    report = gc.run_full_gradcheck(cfg, seed=args.seed)
    for group in sorted(report.groups, key=lambda g: g.group):
        verdict = "OK" if group.max_rel_err < report.tolerance else "FAIL"
        print(
            f"{group.group:14s} max_rel_err {group.max_rel_err:.3e} "
            f"({group.n_params} tensors) {verdict}"
        )
    if report.passed:
        print(f"gradcheck PASS (max {report.max_rel_err:.3e} < {report.tolerance:g})")
        return 0
    print(f"gradcheck FAIL (max {report.max_rel_err:.3e} >= {report.tolerance:g})")
    return 1


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ivqa",
        description="Train and run the answer-to-question generation pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="filter by top answers and build the vocabulary")
    p.add_argument("--data", required=True, help="dataset JSONL")
    p.add_argument("--answer-top", type=int, default=3000, help="keep this many answers")
    p.add_argument("--out", required=True, help="vocabulary file to write")
    p.add_argument("--out-data", help="filtered dataset path (default: <out>.filtered.jsonl)")
    p.set_defaults(fn=cmd_build_vocab)

    p = sub.add_parser("synth", help="generate a deterministic synthetic dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--images", type=int, default=8)
    p.add_argument("--k", type=int, default=4, help="regions per image")
    p.add_argument("--dv", type=int, default=16, help="visual feature length")
    p.add_argument("--qa", type=int, default=1, help="question/answer pairs per image")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model end to end")
    p.add_argument("--config", help="key = value run configuration")
    p.add_argument("--data", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--emb", help="embedding text file (random init when omitted)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-log", help="CSV path (default: alongside the checkpoint)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--ablate", action="store_true", help="drop semantic features entirely")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    p.add_argument("--dry-run", action="store_true", help="validate and echo config only")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", help="decode questions for image/answer pairs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--input", required=True, help='JSONL of {"image_id", "answer"}')
    p.add_argument("--vocab", required=True)
    p.add_argument("--emb", help="embedding file used at training time, if any")
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--top", type=int, default=1)
    p.add_argument("--out", help="output JSONL (default stdout)")
    p.add_argument("--trace", help="write per-step attention traces here")
    p.add_argument("--allow-unk", action="store_true", help="let decoding emit <unk>")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("evaluate", help="score generated questions against gold")
    p.add_argument("--generated", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="verify model gradients vs finite differences")
    p.add_argument("--config", help="overrides for the tiny verification model")
    p.add_argument("--seed", type=int, default=gc.DEFAULT_SEED)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, training.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except training.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
