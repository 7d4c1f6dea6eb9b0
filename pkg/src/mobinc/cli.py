"""Command-line entry point: prepare, train, eval, predict, gradcheck.

Run configs are flat key=value text files ('#' starts a comment); `seed`
is mandatory and every random choice in a run flows from it. Exit codes
are a stable contract: 0 success, 2 input/config error, 3 training
divergence, 4 checkpoint incompatibility, 5 gradient-check failure.
"""

from __future__ import annotations

import argparse
import os
import re
import sys
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import gradcheck
from .arch import build_mob_inc
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    AugmentPolicy,
    CLASS_NAMES,
    DatasetManifest,
    build_manifest,
    load_image,
    preprocess,
)
from .errors import (
    CheckpointError,
    DataError,
    DivergedTrainingError,
    ValidationError,
)
from .graph import FreezePolicy, forward
from .metrics import export_history, save_confusion_csv
from .ops import softmax
from .train import TrainConfig, TrainResult, evaluate, train

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DIVERGED = 3
EXIT_CHECKPOINT = 4
EXIT_GRADCHECK = 5

_FREEZE_PATTERN = re.compile(r"^trunk-except-last-(\d+)$")


def parse_freeze_policy(text: str) -> FreezePolicy:
    if text == "train-all":
        return FreezePolicy("train_all")
    if text == "freeze-all-trunk":
        return FreezePolicy("freeze_all_trunk")
    m = _FREEZE_PATTERN.match(text)
    if m:
        return FreezePolicy("freeze_trunk_except_last_k", k=int(m.group(1)))
    raise ValidationError(
        f"unknown freeze policy {text!r}; expected train-all, freeze-all-trunk, "
        "or trunk-except-last-<k>"
    )


@dataclass
class RunConfig:
    """Everything cmd_train needs, parsed from a flat key=value file."""

    seed: int
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    freeze_policy: str = "train-all"
    fine_tune_all: bool = False
    augment: str = "default"
    width_multiplier: float = 1.0
    num_classes: int = 4
    data_root: str = ""
    out_dir: str = "out"
    init_checkpoint: str = ""

    def train_config(self) -> TrainConfig:
        if self.augment == "default":
            policy = AugmentPolicy.default()
        elif self.augment == "none":
            policy = None
        else:
            raise ValidationError(f"config key augment must be default or none, got {self.augment!r}")
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            optimizer=self.optimizer,
            seed=self.seed,
            freeze=parse_freeze_policy(self.freeze_policy),
            augment=policy,
            fine_tune_all=self.fine_tune_all,
        )

    def provenance(self) -> dict:
        return {
            "seed": self.seed,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "optimizer": self.optimizer,
            "freeze_policy": self.freeze_policy,
            "fine_tune_all": self.fine_tune_all,
            "augment": self.augment,
            "width_multiplier": self.width_multiplier,
            "num_classes": self.num_classes,
        }


_BOOL_VALUES = {"true": True, "false": False, "1": True, "0": False}


def parse_run_config(path: str | Path) -> RunConfig:
    """Parse the flat key=value config; unknown keys and bad values are errors."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    known = {f.name: f.type for f in fields(RunConfig)}
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ValidationError(f"{path}:{lineno}: unknown config key {key!r}")
        if key in raw:
            raise ValidationError(f"{path}:{lineno}: duplicate config key {key!r}")
        raw[key] = value
    if "seed" not in raw:
        raise ValidationError(f"{path}: missing config key 'seed'")
    kwargs: dict = {}
    defaults = RunConfig(seed=0)
    for key, value in raw.items():
        target = type(getattr(defaults, key))
        try:
            if target is bool:
                kwargs[key] = _BOOL_VALUES[value.lower()]
            elif target is int:
                kwargs[key] = int(value)
            elif target is float:
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        except (KeyError, ValueError) as exc:
            raise ValidationError(f"{path}: bad value for config key {key!r}: {value!r}") from exc
    return RunConfig(**kwargs)


def _atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _print_split_summary(manifest: DatasetManifest) -> None:
    print(f"{'class':<22}{'train':>7}{'val':>6}{'test':>6}{'total':>7}")
    totals = [0, 0, 0]
    for name in CLASS_NAMES:
        row = [manifest.class_counts(split).get(name, 0) for split in ("train", "val", "test")]
        totals = [a + b for a, b in zip(totals, row)]
        print(f"{name:<22}{row[0]:>7}{row[1]:>6}{row[2]:>6}{sum(row):>7}")
    print(f"{'total':<22}{totals[0]:>7}{totals[1]:>6}{totals[2]:>6}{sum(totals):>7}")


def cmd_prepare(args) -> int:
    manifest = build_manifest(args.data_root, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest.save_csv(out)
    print(f"manifest written to {out}")
    _print_split_summary(manifest)
    return EXIT_OK


def _resolve_manifest(args, config: RunConfig | None) -> DatasetManifest:
    manifest_path = Path(args.manifest)
    root = getattr(args, "data_root", None) or (config.data_root if config else "")
    manifest = DatasetManifest.load_csv(
        manifest_path, root=root or manifest_path.parent,
        seed=config.seed if config else 0,
    )
    return manifest


def _build_model(config: RunConfig):
    return build_mob_inc(
        width_multiplier=config.width_multiplier,
        num_classes=config.num_classes,
        seed=config.seed,
    )


def cmd_train(args) -> int:
    config = parse_run_config(args.config)
    if args.freeze_policy:
        config.freeze_policy = args.freeze_policy
    manifest = _resolve_manifest(args, config)
    out_dir = Path(args.out or config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = _build_model(config)
    if config.init_checkpoint:
        load_checkpoint(model, config.init_checkpoint)
    result: TrainResult = train(model, manifest, config.train_config())
    save_checkpoint(model, out_dir / "checkpoint.minc")
    export_history(result.history, out_dir / "history.csv", out_dir / "history.svg")
    _, report = evaluate(model, manifest, "val", config.batch_size,
                         config_info=config.provenance() | {"best_epoch": result.best_epoch})
    report.save_json(out_dir / "report.json")
    print(f"trained {len(result.history)} epochs; best epoch {result.best_epoch} "
          f"(val acc {result.best_val_acc:.4f}, val loss {result.best_val_loss:.4f})")
    print(f"artifacts in {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = parse_run_config(args.config) if args.config else RunConfig(seed=0)
    manifest = _resolve_manifest(args, config)
    model = _build_model(config)
    load_checkpoint(model, args.checkpoint)
    _, report = evaluate(model, manifest, args.split, config.batch_size,
                         config_info=config.provenance() if args.config else None)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.save_json(out_dir / "report.json")
    save_confusion_csv(report.confusion, out_dir / "confusion.csv")
    print(f"split={args.split} accuracy={report.accuracy:.4f} loss={report.loss:.4f}")
    print(f"report in {out_dir}")
    return EXIT_OK


def cmd_predict(args) -> int:
    config = parse_run_config(args.config) if args.config else RunConfig(seed=0)
    image = load_image(args.image)
    model = _build_model(config)
    load_checkpoint(model, args.checkpoint)
    x = preprocess(image)
    logits = forward(model, x, "infer").output
    probs = softmax(logits)[0]
    label = CLASS_NAMES[int(np.argmax(probs))]
    print(f"prediction: {label}")
    for name, p in zip(CLASS_NAMES, probs):
        print(f"{name}: {p:.8f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = gradcheck.run_suite(seed=args.seed, instances=args.instances)
    print(gradcheck.format_table(reports))
    failing = [r for r in reports if not r.passed]
    if failing:
        for r in failing:
            print(f"FAIL: {r.name} max relative error {r.max_rel_err:.3e} "
                  f"exceeds {gradcheck.TOLERANCE:.1e}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mobinc",
        description="Train and evaluate the Mob-INC maize leaf disease classifier.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="scan a dataset tree and write the split manifest")
    p.add_argument("--data-root", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="manifest CSV path")
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("train", help="train from a run config and manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default="", help="output directory (default: config out_dir)")
    p.add_argument("--data-root", default="", help="override dataset root")
    p.add_argument("--freeze-policy", default="",
                   help="override config freeze policy (e.g. trunk-except-last-6)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", default=".", help="output directory for report/confusion")
    p.add_argument("--data-root", default="")
    p.add_argument("--config", default="", help="run config used to rebuild the model")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="classify one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--config", default="")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except DivergedTrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (ValidationError, DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
