"""Evaluation indicators: confusion matrix, per-class one-vs-rest metrics,
and training-history export.

Class order everywhere is (healthy, northern_leaf_blight, gray_leaf_spot,
common_rust); confusion rows are true classes, columns predictions. All
metrics are reported as unit fractions (a specificity of 0.9547 is the
percent figure 95.47 divided by 100).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import CLASS_NAMES
from .errors import ValidationError
from .fileio import atomic_write_text


def confusion_from_predictions(true_idx, pred_idx, num_classes: int = len(CLASS_NAMES)):
    """Accumulate a (k, k) integer confusion matrix, rows = true class."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(np.asarray(true_idx).ravel(), np.asarray(pred_idx).ravel()):
        cm[int(t), int(p)] += 1
    return cm


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    sensitivity: float
    specificity: float
    f1: float
    # names of metrics whose denominator was zero (value forced to 0)
    degenerate: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        out = {
            "precision": self.precision,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "f1": self.f1,
        }
        if self.degenerate:
            out["degenerate"] = list(self.degenerate)
        return out


@dataclass
class EvalReport:
    accuracy: float
    loss: float
    per_class: dict[str, ClassMetrics]
    confusion: np.ndarray
    config: dict | None = None

    def to_json_dict(self) -> dict:
        out = {
            "accuracy": self.accuracy,
            "loss": self.loss,
            "per_class": {name: m.as_dict() for name, m in self.per_class.items()},
            "confusion": self.confusion.tolist(),
        }
        if self.config is not None:
            out["config"] = self.config
        return out

    def save_json(self, path: str | Path) -> None:
        atomic_write_text(path, json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n")


def _ratio(num: int, den: int, metric: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(metric)
        return 0.0
    return num / den


def compute_metrics(cm: np.ndarray, class_names=None) -> tuple[float, dict[str, ClassMetrics]]:
    """One-vs-rest precision/sensitivity/specificity/F1 per class.

    accuracy = trace / total, computed on the integer counts. Zero
    denominators yield 0 and are recorded in the class's degenerate flags.
    """
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValidationError(f"confusion matrix must be square, got {cm.shape}")
    if np.any(cm < 0):
        raise ValidationError("confusion matrix entries must be non-negative")
    if not np.issubdtype(cm.dtype, np.integer):
        if not np.all(cm == np.round(cm)):
            raise ValidationError("confusion matrix entries must be integer counts")
        cm = cm.astype(np.int64)
    total = int(cm.sum())
    if total <= 0:
        raise ValidationError("confusion matrix total count must be > 0")
    k = cm.shape[0]
    if class_names is None:
        class_names = CLASS_NAMES if k == len(CLASS_NAMES) else tuple(
            f"class_{i}" for i in range(k)
        )
    accuracy = int(np.trace(cm)) / total
    per_class: dict[str, ClassMetrics] = {}
    for c in range(k):
        tp = int(cm[c, c])
        row = int(cm[c].sum())
        col = int(cm[:, c].sum())
        fp = col - tp
        fn = row - tp
        tn = total - row - col + tp
        flags: list[str] = []
        precision = _ratio(tp, tp + fp, "precision", flags)
        sensitivity = _ratio(tp, tp + fn, "sensitivity", flags)
        specificity = _ratio(tn, tn + fp, "specificity", flags)
        if precision + sensitivity > 0:
            f1 = 2 * precision * sensitivity / (precision + sensitivity)
        else:
            flags.append("f1")
            f1 = 0.0
        per_class[class_names[c]] = ClassMetrics(
            precision, sensitivity, specificity, f1, tuple(flags)
        )
    return accuracy, per_class


def save_confusion_csv(cm: np.ndarray, path: str | Path, class_names=CLASS_NAMES) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["true\\pred", *class_names])
        for name, row in zip(class_names, np.asarray(cm)):
            writer.writerow([name, *[int(v) for v in row]])


# ---------------------------------------------------------------------------
# training history


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_acc: float
    val_acc: float
    train_loss: float
    val_loss: float


def export_history(history: list[EpochStats], path: str | Path,
                   svg_path: str | Path | None = None) -> None:
    """Write `epoch,train_acc,val_acc,train_loss,val_loss` CSV (and an
    optional SVG chart of the accuracy and loss curves)."""
    if not history:
        raise ValidationError("history is empty")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_acc", "val_acc", "train_loss", "val_loss"])
        for s in history:
            writer.writerow([
                s.epoch, f"{s.train_acc:.6f}", f"{s.val_acc:.6f}",
                f"{s.train_loss:.6f}", f"{s.val_loss:.6f}",
            ])
    if svg_path is not None:
        Path(svg_path).write_text(render_history_svg(history), encoding="utf-8")


def load_history_csv(path: str | Path) -> list[EpochStats]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            out.append(EpochStats(
                int(row["epoch"]), float(row["train_acc"]), float(row["val_acc"]),
                float(row["train_loss"]), float(row["val_loss"]),
            ))
    return out


def _polyline(xs, ys, x0, y0, width, height, y_min, y_max, color) -> str:
    span = (y_max - y_min) or 1.0
    pts = []
    for i, (x, y) in enumerate(zip(xs, ys)):
        px = x0 + width * (i / max(len(xs) - 1, 1))
        py = y0 + height * (1 - (y - y_min) / span)
        pts.append(f"{px:.2f},{py:.2f}")
    return (f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
            f'points="{" ".join(pts)}"/>')


def render_history_svg(history: list[EpochStats]) -> str:
    """Two charts side by side (accuracy, loss), two polylines each."""
    epochs = [s.epoch for s in history]
    panels = [
        ("accuracy", [s.train_acc for s in history], [s.val_acc for s in history]),
        ("loss", [s.train_loss for s in history], [s.val_loss for s in history]),
    ]
    w, h, pad = 320, 220, 34
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{2 * w}" height="{h}">'
    ]
    for i, (title, train, val) in enumerate(panels):
        x0 = i * w + pad
        y_min = min(min(train), min(val))
        y_max = max(max(train), max(val))
        parts.append(f'<g id="{title}">')
        parts.append(
            f'<rect x="{x0}" y="{pad}" width="{w - 2 * pad}" height="{h - 2 * pad}" '
            'fill="none" stroke="#999"/>'
        )
        parts.append(f'<text x="{x0}" y="{pad - 8}" font-size="12">{title}</text>')
        parts.append(_polyline(epochs, train, x0, pad, w - 2 * pad, h - 2 * pad,
                               y_min, y_max, "#1f77b4"))
        parts.append(_polyline(epochs, val, x0, pad, w - 2 * pad, h - 2 * pad,
                               y_min, y_max, "#d62728"))
        parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
