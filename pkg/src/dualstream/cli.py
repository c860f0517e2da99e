"""Command-line entry point.

Subcommands: synth-data, train, generate, ensemble-generate, evaluate,
grad-check. Configuration resolves in order: paper defaults, ``--profile``,
``--config`` JSON file, explicit flags. Every command writes a run manifest
(``<output>.manifest.json`` unless ``--manifest`` is given) recording the
resolved configuration, seeds, paths and SHA-256 hashes of its outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import kernels
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    BOS,
    EOS,
    FIELD_TAG_IDS,
    FIELDS,
    BoundarySample,
    CaptionTriplet,
    SynthConfig,
    Vocabulary,
    load_dataset,
    load_pretrained_embeddings,
    synth_dataset,
)
from .decoding import predict_triplets, read_predictions, write_predictions
from .gradcheck import check_gradients
from .metrics import predictions_to_tokens, read_references, triplet_average
from .model import ModelConfig, ModelParams, parameter_count
from .training import Example, TrainConfig, example_loss, train, write_loss_csv

log = logging.getLogger("dualstream")

PAPER_DEFAULTS = {
    "layers": 3, "d": 768, "heads": 12, "d_emb": 300, "max_caption_len": 32, "max_frames": 64,
    "learning_rate": 1e-4, "max_epochs": 10, "batch_size": 100, "lambda1": 0.5, "lambda2": 0.5,
}
PROFILES = {
    "paper": {},
    "desk": {"layers": 2, "d": 32, "heads": 4, "batch_size": 8, "d_emb": 32,
             "max_caption_len": 16, "max_frames": 16},
}
GRAD_CHECK_TOLERANCE = 1e-4

_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


class UsageError(Exception):
    pass


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _default_seed() -> int:
    raw = os.environ.get("DSC_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"DSC_SEED must be an integer, got {raw!r}") from None


def _resolve(args, flag_map: dict[str, str]) -> dict:
    """Defaults < profile < config file < flags."""
    values = dict(PAPER_DEFAULTS)
    values.update(PROFILES[args.profile])
    if args.config:
        try:
            values.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from None
    for key, attr in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            values[key] = v
    return values


def _write_manifest(args, command: str, config: dict, inputs: dict, outputs: dict,
                    started: float) -> Path:
    path = Path(args.manifest) if args.manifest else Path(str(next(iter(outputs.values()))) + ".manifest.json")
    manifest = {
        "command": command,
        "argv": sys.argv[1:] if args.argv is None else args.argv,
        "config": config,
        "seeds": {"seed": args.seed},
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "artifact_hashes": {k: _sha256(Path(v)) for k, v in outputs.items()},
        "kernel_backend": kernels.BACKEND,
        "timing": {"started_unix": started, "wall_clock_seconds": time.time() - started},
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args) -> int:
    started = time.time()
    cfg = SynthConfig()
    for key in ("t_app", "t_mot", "regions", "d_app", "d_mot", "d_reg", "d_typ", "n_templates"):
        v = getattr(args, key)
        if v is not None:
            setattr(cfg, key, v)
    out = synth_dataset(args.out, args.seed, args.n, cfg)
    config = {**dataclasses.asdict(cfg), "n": args.n}
    _write_manifest(args, "synth-data", config, {}, {"dataset": out}, started)
    print(f"wrote {args.n} samples to {out}")
    return 0


_TRAIN_FLAGS = {
    "layers": "layers", "d": "d", "heads": "heads", "d_emb": "d_emb",
    "max_caption_len": "max_caption_len", "max_frames": "max_frames",
    "learning_rate": "lr", "max_epochs": "epochs", "batch_size": "batch_size",
    "lambda1": "lambda1", "lambda2": "lambda2", "max_steps": "max_steps",
}


def cmd_train(args) -> int:
    started = time.time()
    data_path = _require_file(args.data, "dataset")
    values = _resolve(args, _TRAIN_FLAGS)
    dataset = load_dataset(data_path)
    h = dataset.header
    if h is None:
        raise UsageError(f"dataset {data_path} has no header line")
    model_values = {k: v for k, v in values.items() if k in _MODEL_KEYS}
    model_values.update(vocab_size=len(dataset.vocab), n_types=len(h.boundary_types),
                        d_app=h.d_app, d_mot=h.d_mot, d_reg=h.d_reg, d_typ=h.d_typ,
                        max_regions=h.max_regions)
    model_cfg = ModelConfig(**model_values)
    train_values = {k: v for k, v in values.items() if k in _TRAIN_KEYS}
    train_cfg = TrainConfig(**{**train_values, "seed": args.seed, "threads": args.threads})
    pretrained = None
    if args.pretrained_embeddings:
        pretrained = load_pretrained_embeddings(
            _require_file(args.pretrained_embeddings, "embedding file"), dataset.vocab, model_cfg.d_emb)
    result = train(dataset, model_cfg, train_cfg, pretrained,
                   on_step=lambda r: log.debug("epoch %d step %d loss %.6f", r.epoch, r.step, r.loss))
    ckpt = save_checkpoint(args.out, result.model, dataset.vocab.tokens, h.boundary_types)
    loss_csv = Path(args.loss_csv) if args.loss_csv else Path(str(args.out) + ".loss.csv")
    write_loss_csv(loss_csv, result.log)
    for epoch, mean in enumerate(result.epoch_means()):
        print(f"epoch {epoch} mean loss {mean:.6f}")
    config = {"model": result.model.config.to_json(), "train": dataclasses.asdict(train_cfg),
              "profile": args.profile}
    _write_manifest(args, "train", config, {"dataset": data_path},
                    {"checkpoint": ckpt, "loss_csv": loss_csv}, started)
    return 0


def _load_models(paths: list[str]):
    models, vocab, types = [], None, None
    for p in paths:
        model, header = load_checkpoint(_require_file(p, "checkpoint"))
        if "vocab" not in header:
            raise UsageError(f"checkpoint {p} carries no vocabulary")
        if vocab is not None and header["vocab"] != vocab:
            raise UsageError(f"checkpoint {p} has a different vocabulary from {paths[0]}")
        vocab = header["vocab"]
        types = header.get("boundary_types")
        models.append(model)
    return models, Vocabulary.from_tokens(vocab), types


def _generate(args, paths: list[str], command: str) -> int:
    started = time.time()
    data_path = _require_file(args.data, "dataset")
    models, vocab, types = _load_models(paths)
    dataset = load_dataset(data_path, vocab=vocab)
    if types is not None and dataset.header is not None and dataset.header.boundary_types != types:
        raise UsageError("dataset boundary types differ from the checkpoint's")
    executor = ThreadPoolExecutor(args.threads) if args.threads > 1 else None
    try:
        rows = predict_triplets(dataset.samples, models, vocab, args.max_len, executor)
    finally:
        if executor is not None:
            executor.shutdown()
    write_predictions(args.out, rows)
    print(f"wrote {len(rows)} predictions to {args.out}")
    _write_manifest(args, command, {"max_len": args.max_len, "checkpoints": paths},
                    {"dataset": data_path, **{f"checkpoint{i}": p for i, p in enumerate(paths)}},
                    {"predictions": Path(args.out)}, started)
    return 0


def cmd_generate(args) -> int:
    return _generate(args, [args.checkpoint], "generate")


def cmd_ensemble_generate(args) -> int:
    if len(args.checkpoint) < 2:
        raise UsageError("ensemble-generate needs at least two --checkpoint arguments")
    return _generate(args, args.checkpoint, "ensemble-generate")


def cmd_evaluate(args) -> int:
    started = time.time()
    pred_path = _require_file(args.predictions, "predictions file")
    ref_path = _require_file(args.references, "references file")
    report = triplet_average(predictions_to_tokens(read_predictions(pred_path)), read_references(ref_path))
    out = Path(args.out)
    out.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for m, scores in report.metrics.items():
        cells = " ".join(f"{f}={scores[f]:.4f}" for f in (*FIELDS, "average"))
        print(f"{m}: {cells}")
    _write_manifest(args, "evaluate", {}, {"predictions": pred_path, "references": ref_path},
                    {"report": out}, started)
    return 0


def grad_check_setup(seed: int, d: int, heads: int, layers: int, vocab: int = 20,
                     t_app: int = 3, t_mot: int = 2, regions: int = 4, caption_len: int = 4):
    """Random tiny model, sample and teacher-forced example for gradient checking.

    ``caption_len`` counts decoder input rows (``<bos> <tag>`` plus words).
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(vocab_size=vocab, n_types=3, layers=layers, d=d, heads=heads, d_emb=8,
                      d_app=6, d_mot=5, d_reg=7, d_typ=4, max_caption_len=caption_len,
                      max_frames=max(t_app, t_mot))
    words = tuple(int(w) for w in rng.integers(7, vocab, size=caption_len - 2))
    sample = BoundarySample("gradcheck", rng.standard_normal((t_app, 6)), rng.standard_normal((t_mot, 5)),
                            rng.standard_normal((regions, 7)), int(rng.integers(3)),
                            CaptionTriplet(words, words, words))
    params = ModelParams.initialize(cfg, seed)
    # move gains, biases and tables off their initial values so no gradient is trivially tiny
    for name, t in params.items():
        if name.endswith((".gain", ".bias")) or name.startswith(("emb.", "pos.")):
            t.data += rng.normal(0.0, 0.1, size=t.shape)
    ex = Example(sample, "before", (BOS, FIELD_TAG_IDS["before"]) + words, words + (EOS,))
    return cfg, params, ex


def cmd_grad_check(args) -> int:
    started = time.time()
    cfg, params, ex = grad_check_setup(args.seed, args.d, args.heads, args.layers, args.vocab)
    errors = check_gradients(lambda: example_loss(ex, params, cfg, 0.5, 0.5), list(params),
                             h=args.step, max_entries=args.max_entries, names=params.names())
    width = max(len(n) for n in errors)
    for name, err in errors.items():
        print(f"{name:<{width}}  {err:.3e}")
    worst = max(errors.values())
    print(f"max relative error {worst:.3e} over {len(errors)} parameter groups "
          f"({parameter_count(cfg)} parameters), tolerance {args.tolerance:g}")
    if args.manifest:
        Path(args.manifest).write_text(json.dumps({
            "command": "grad-check", "config": cfg.to_json(), "seeds": {"seed": args.seed},
            "max_relative_error": worst, "errors": errors,
            "timing": {"started_unix": started, "wall_clock_seconds": time.time() - started},
        }, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0 if worst < args.tolerance else 1


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (fallback: $DSC_SEED, then 0)")
    common.add_argument("--threads", type=int, default=1, help="worker cap; results do not depend on it")
    common.add_argument("--config", help="JSON file of configuration values")
    common.add_argument("--profile", choices=sorted(PROFILES), default="paper")
    common.add_argument("--manifest", help="run manifest path")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dualstream", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    for flag in ("t-app", "t-mot", "regions", "d-app", "d-mot", "d-reg", "d-typ"):
        p.add_argument(f"--{flag}", type=int)
    p.add_argument("--templates", dest="n_templates", type=int)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-csv")
    p.add_argument("--pretrained-embeddings", help="GloVe-format text file for the token table")
    for flag, typ in (("layers", int), ("d", int), ("heads", int), ("d-emb", int),
                      ("max-caption-len", int), ("max-frames", int), ("lr", float),
                      ("epochs", int), ("batch-size", int), ("lambda1", float),
                      ("lambda2", float), ("max-steps", int)):
        p.add_argument(f"--{flag}", type=typ)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", parents=[common], help="greedy captions from one checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-len", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("ensemble-generate", parents=[common],
                       help="word-level ensemble captions from two or more checkpoints")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-len", type=int)
    p.set_defaults(func=cmd_ensemble_generate)

    p = sub.add_parser("evaluate", parents=[common], help="ROUGE-L and CIDEr-D per caption field")
    p.add_argument("--predictions", required=True)
    p.add_argument("--references", required=True, help="reference file or dataset file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--vocab", type=int, default=20)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--tolerance", type=float, default=GRAD_CHECK_TOLERANCE)
    p.add_argument("--max-entries", type=int, default=None,
                   help="check at most this many random entries per parameter group")
    p.set_defaults(func=cmd_grad_check)
    return parser


def _origin(exc: BaseException) -> str:
    """Innermost package module the exception passed through."""
    module = type(exc).__module__
    tb = exc.__traceback__
    while tb is not None:
        name = tb.tb_frame.f_globals.get("__name__", "")
        if name.startswith("dualstream."):
            module = name
        tb = tb.tb_next
    return module


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        if args.seed is None:
            args.seed = _default_seed()
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    except (ValueError, KeyError, OSError) as exc:
        print(f"dualstream {args.command}: error in {_origin(exc)}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
