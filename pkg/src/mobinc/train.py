"""Optimization loop, evaluation, and the training history bookkeeping.

The optimizer default is Adam (beta1 0.9, beta2 0.999, eps 1e-8) at
learning rate 1e-3 with batch size 32; plain SGD is selectable. Nothing in
the training loop draws entropy outside the config seed. The best model is
selected by highest validation accuracy, ties broken by lower validation
loss, and restored into the graph when training finishes.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import (
    AugmentPolicy,
    CLASS_NAMES,
    DatasetManifest,
    ImageCache,
    balance_classes,
    batches,
)
from .errors import DivergedTrainingError, MobIncError, ValidationError
from .graph import FreezePolicy, ModelGraph, apply_freeze, backward, forward
from .metrics import (
    ClassMetrics,
    EpochStats,
    EvalReport,
    compute_metrics,
    confusion_from_predictions,
)
from .ops import softmax_cross_entropy, softmax_cross_entropy_grad

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    freeze: FreezePolicy = field(default_factory=lambda: FreezePolicy("train_all"))
    augment: AugmentPolicy | None = None
    fine_tune_all: bool = False  # phase B: unfreeze everything, train again

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValidationError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")


class Optimizer:
    """Adam or plain SGD over a fixed set of trainable parameters.

    step() mutates the parameter arrays in place. Gradients must cover only
    the registered (trainable) parameters; anything else trips an invariant
    error because it means a frozen parameter produced a gradient.
    """

    def __init__(self, kind: str, learning_rate: float,
                 params: dict[str, np.ndarray]):
        if kind not in ("adam", "sgd"):
            raise ValidationError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.lr = learning_rate
        self.params = params
        self.t = 0
        if kind == "adam":
            self.m = {k: np.zeros_like(v) for k, v in params.items()}
            self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        unknown = set(grads) - set(self.params)
        if unknown:
            raise MobIncError(
                f"gradients supplied for non-trainable parameters: {sorted(unknown)[:3]}"
            )
        self.t += 1
        if self.kind == "sgd":
            for name, g in grads.items():
                self.params[name] -= np.asarray(self.lr * g, dtype=self.params[name].dtype)
            return
        b1, b2 = ADAM_BETA1, ADAM_BETA2
        correct1 = 1.0 - b1**self.t
        correct2 = 1.0 - b2**self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            update = (m / correct1) / (np.sqrt(v / correct2) + ADAM_EPS)
            self.params[name] -= np.asarray(self.lr * update, dtype=self.params[name].dtype)


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                   state: Optimizer | None, config: TrainConfig) -> Optimizer:
    """Functional veneer: create state on first use, apply one update."""
    if state is None:
        state = Optimizer(config.optimizer, config.learning_rate, params)
    state.step(grads)
    return state


def _eval_workers() -> int:
    raw = os.environ.get("MOBINC_THREADS", "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        return 1


def evaluate_predictions(predict_fn, batch_iter):
    """Confusion matrix + mean loss for any (x -> logits) callable."""
    cm = np.zeros((len(CLASS_NAMES), len(CLASS_NAMES)), dtype=np.int64)
    loss_sum = 0.0
    count = 0
    chunks = list(batch_iter)
    workers = _eval_workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            logits_list = list(pool.map(lambda xy: predict_fn(xy[0]), chunks))
    else:
        logits_list = [predict_fn(x) for x, _ in chunks]
    for (x, y), logits in zip(chunks, logits_list):
        loss, _ = softmax_cross_entropy(logits, y)
        loss_sum += loss * x.shape[0]
        count += x.shape[0]
        cm += confusion_from_predictions(y.argmax(axis=1), logits.argmax(axis=1))
    if count == 0:
        raise ValidationError("evaluation split is empty")
    return cm, loss_sum / count


def evaluate(model: ModelGraph, manifest: DatasetManifest, split: str,
             batch_size: int = 32, cache: ImageCache | None = None,
             config_info: dict | None = None) -> tuple[np.ndarray, EvalReport]:
    """Infer-mode pass over a split: confusion matrix plus full report.

    Prediction is the argmax of the logits (lowest index wins ties).
    """
    if not manifest.split_records(split):
        raise ValidationError(f"split {split!r} is empty")
    batch_iter = batches(manifest, split, batch_size, manifest.seed, 0, cache=cache)
    cm, mean_loss = evaluate_predictions(
        lambda x: forward(model, x, "infer").output, batch_iter
    )
    accuracy, per_class = compute_metrics(cm)
    report = EvalReport(accuracy, mean_loss, per_class, cm, config_info)
    return cm, report


@dataclass
class TrainResult:
    history: list[EpochStats]
    best_epoch: int
    best_val_acc: float
    best_val_loss: float


def _snapshot(model: ModelGraph) -> dict[str, np.ndarray]:
    return {name: arr.copy() for name, _, arr in model.state_entries()}


def _restore(model: ModelGraph, snap: dict[str, np.ndarray]) -> None:
    for name, _, arr in model.state_entries():
        arr[...] = snap[name]


def train(model: ModelGraph, manifest: DatasetManifest, config: TrainConfig,
          cache: ImageCache | None = None, on_epoch=None) -> TrainResult:
    """Run the optimization loop.

    Per epoch: iterate the (rebalanced, optionally augmented) train
    batches, take an optimizer step per batch, then score train and val
    splits in infer mode. With fine_tune_all, a second phase of the same
    length repeats with every layer unfrozen. Raises DivergedTrainingError
    the moment a batch loss is non-finite.
    """
    cache = cache if cache is not None else ImageCache()
    balanced = balance_classes(manifest, np.random.default_rng([config.seed, 77]))
    phases = [(config.freeze, config.epochs)]
    if config.fine_tune_all:
        phases.append((FreezePolicy("train_all"), config.epochs))

    history: list[EpochStats] = []
    best_key: tuple[float, float] | None = None  # (val_acc, -val_loss)
    best_epoch = 0
    best_state: dict[str, np.ndarray] | None = None
    epoch = 0
    for freeze_policy, n_epochs in phases:
        apply_freeze(model, freeze_policy)
        optimizer = Optimizer(config.optimizer, config.learning_rate,
                              model.param_dict(trainable_only=True))
        for _ in range(n_epochs):
            epoch += 1
            batch_iter = batches(manifest, "train", config.batch_size, config.seed,
                                 epoch, items=balanced, policy=config.augment,
                                 cache=cache)
            for batch_idx, (x, y) in enumerate(batch_iter):
                trace = forward(model, x, "train")
                loss, probs = softmax_cross_entropy(trace.output, y)
                if not math.isfinite(loss):
                    raise DivergedTrainingError(epoch, batch_idx, loss)
                grads = backward(model, trace, softmax_cross_entropy_grad(probs, y))
                optimizer.step(dict(grads))
            _, train_eval = evaluate(model, manifest, "train", config.batch_size, cache)
            _, val_eval = evaluate(model, manifest, "val", config.batch_size, cache)
            stats = EpochStats(epoch, train_eval.accuracy, val_eval.accuracy,
                               train_eval.loss, val_eval.loss)
            history.append(stats)
            key = (val_eval.accuracy, -val_eval.loss)
            if best_key is None or key > best_key:
                best_key = key
                best_epoch = epoch
                best_state = _snapshot(model)
            if on_epoch is not None and on_epoch(stats):
                break
    if best_state is not None:
        _restore(model, best_state)
    return TrainResult(history, best_epoch, best_key[0], -best_key[1])
