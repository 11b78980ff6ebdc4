"""Command-line entry point: train, eval, gradcheck, bench, make-data.

Configuration lives in a JSON file; any value can be overridden on the
command line with ``--set dotted.key=value``. The SFBNET_SEED environment
variable overrides the configured seed. Exit codes: 0 ok, 1 check
failure, 2 input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import NumericError, SfbnetError
from .loss import dice_score
from .model import ModelConfig, build_model, cost_report, load_checkpoint
from .pipeline import (
    CLASS_NAMES,
    largest_component_filter,
    load_dataset,
    predict_probs,
    tta_mirror_predict,
    write_phantom_dataset,
)
from .train import TrainSettings, train
from .verify import TOLERANCE, corrupt_backward, format_report, gradient_report

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INPUT_ERROR = 2
EXIT_NUMERIC_ERROR = 3


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    train: TrainSettings
    train_dir: str = "data/train"
    val_dir: str = "data/val"
    out_dir: str = "runs/default"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        model = ModelConfig.from_dict(d.get("model", {}))
        settings = TrainSettings(**d.get("train", {}))
        settings.validate()
        data = d.get("data", {})
        return cls(
            model=model,
            train=settings,
            train_dir=data.get("train_dir", "data/train"),
            val_dir=data.get("val_dir", "data/val"),
            out_dir=d.get("out_dir", "runs/default"),
            seed=int(d.get("seed", 0)),
        )


def _apply_override(tree: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise SfbnetError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = tree
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise SfbnetError(f"--set path {key!r} crosses a non-object value")
    node[parts[-1]] = value


def load_run_config(path: str, overrides) -> RunConfig:
    try:
        with open(path) as fh:
            tree = json.load(fh)
    except FileNotFoundError as exc:
        raise SfbnetError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise SfbnetError(f"config file {path} is not valid JSON: {exc}") from exc
    for assignment in overrides or ():
        _apply_override(tree, assignment)
    env_seed = os.environ.get("SFBNET_SEED")
    if env_seed is not None:
        tree["seed"] = int(env_seed)
    config = RunConfig.from_dict(tree)
    config.model = dataclasses.replace(config.model, seed=config.seed)
    return config


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    config = load_run_config(args.config, args.set)
    samples = load_dataset(config.train_dir)
    model = build_model(config.model)
    history = train(model, samples, config.train, seed=config.seed,
                    out_dir=config.out_dir)
    final = history[-1]
    print(json.dumps({
        "checkpoint": str(Path(config.out_dir) / "model.sfbn"),
        "final_loss": final["loss"],
        "final_dice": final.get("dice"),
        "epochs": len(history),
    }))
    return EXIT_OK


def cmd_eval(args) -> int:
    config = load_run_config(args.config, args.set)
    samples = load_dataset(args.data or config.val_dir)
    model = build_model(config.model)
    load_checkpoint(model, args.ckpt)

    per_class = {name: [] for name in CLASS_NAMES.values()}
    for sample in samples:
        if args.tta:
            probs = tta_mirror_predict(model, sample.image)
            pred = probs.argmax(axis=0)
        else:
            probs = predict_probs(model, sample.image[None])
            pred = probs[0].argmax(axis=0)
        if args.postprocess:
            pred = largest_component_filter(pred)
        for cls, name in CLASS_NAMES.items():
            per_class[name].append(dice_score(pred, sample.labels, cls))

    report = {
        "per_class_dice": {name: float(np.mean(v)) for name, v in per_class.items()},
        "n_images": len(samples),
        "tta": bool(args.tta),
        "postprocess": bool(args.postprocess),
    }
    report["mean_dice"] = float(np.mean(list(report["per_class_dice"].values())))
    print(json.dumps(report))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    config = load_run_config(args.config, args.set)
    if args.corrupt:
        with corrupt_backward(args.corrupt):
            results = gradient_report(config.model, seed=config.seed)
    else:
        results = gradient_report(config.model, seed=config.seed)
    print(format_report(results))
    failures = [r.name for r in results if not r.passed]
    if failures:
        print(f"gradcheck FAILED (tolerance {TOLERANCE:g}): {', '.join(failures)}",
              file=sys.stderr)
        return EXIT_CHECK_FAILED
    print(f"gradcheck passed: all components below {TOLERANCE:g}")
    return EXIT_OK


def cmd_bench(args) -> int:
    config = load_run_config(args.config, args.set)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    rows = []
    for variant in variants:
        report = cost_report(config.model, variant, repeats=args.repeats,
                             throughput_batch=args.throughput_batch)
        rows.append(report.to_dict())
        print(f"{variant:>10}: params={report.parameters:>12,}  "
              f"Gflops={report.gflops:8.2f}  images/s={report.images_per_s:8.2f}  "
              f"batch={report.batch_size}", file=sys.stderr)
    print(json.dumps(rows))
    return EXIT_OK


def cmd_make_data(args) -> int:
    n = write_phantom_dataset(args.out, args.cases, size=tuple(args.size),
                              seed=args.seed)
    print(json.dumps({"directory": args.out, "cases": n}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sfbnet",
        description="Train, evaluate and benchmark the gated-skip segmentation net.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry (dotted path)")

    p = sub.add_parser("train", help="train a model from a config")
    add_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, per-class Dice")
    add_config(p)
    p.add_argument("--ckpt", required=True, help="checkpoint file (.sfbn)")
    p.add_argument("--tta", action="store_true", help="mirror test-time augmentation")
    p.add_argument("--postprocess", action="store_true",
                   help="keep only the largest connected foreground component")
    p.add_argument("--data", help="override the evaluation data directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    add_config(p)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)  # negative-control fixture
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="parameter/FLOP/throughput table")
    add_config(p)
    p.add_argument("--variants", default="full,no_sfb,no_trans")
    p.add_argument("--repeats", type=int, default=100)
    p.add_argument("--throughput-batch", type=int, default=None,
                   help="fix the throughput batch instead of the memory fit")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("make-data", help="write a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--cases", type=int, default=8)
    p.add_argument("--size", type=int, nargs=2, default=(64, 64), metavar=("H", "W"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_data)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC_ERROR
    except (SfbnetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
