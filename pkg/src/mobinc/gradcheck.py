"""Finite-difference verification of every layer's backward pass.

Each case builds a small op in float64, runs forward in train mode, and
compares the analytic gradient of a fixed random scalar projection of the
output against central differences (h = 1e-3) for every input element and
every parameter element. Activation inputs are resampled away from the
relu/relu6 kinks, where the subgradient convention makes the comparison
meaningless.

The reported figure per op is max over instances of
||analytic - numeric||_inf / (||analytic||_inf + ||numeric||_inf).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops

H = 1e-3
TOLERANCE = 1e-5
# central differences with step H straddle a relu kink when the input sits
# closer than H to it, so sample test points well clear of that band
KINK_MARGIN = 10 * H


def _project_loss(y: np.ndarray, r: np.ndarray) -> float:
    return float((y * r).sum())


def _relative(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.abs(analytic).max() + np.abs(numeric).max()
    if denom == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / denom)


def check_op(op: ops.Op, xs: list[np.ndarray], mode: str = "train") -> float:
    """Max relative FD error over all inputs and parameters of one instance."""
    y, cache = op.forward(xs, mode)
    rng = np.random.default_rng(abs(hash((op.kind, y.shape))) % (2**32))
    r = rng.normal(0.0, 1.0, size=y.shape)
    need_input = tuple(True for _ in xs)
    in_grads, p_grads = op.backward(r, cache, need_input, True)

    worst = 0.0

    def numeric_grad(read):
        # evaluate the projection immediately: some ops return views of x
        arr = read()
        flat = arr.reshape(-1)
        num = np.empty_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + H
            lp = _project_loss(op.forward(xs, mode)[0], r)
            flat[i] = keep - H
            lm = _project_loss(op.forward(xs, mode)[0], r)
            flat[i] = keep
            num[i] = (lp - lm) / (2 * H)
        return num.reshape(arr.shape)

    for x, g in zip(xs, in_grads):
        num = numeric_grad(lambda x=x: x)
        worst = max(worst, _relative(g, num))
    params = op.param_arrays()
    for name, g in p_grads.items():
        num = numeric_grad(lambda name=name: params[name])
        worst = max(worst, _relative(g, num))
    return worst


def _away_from_kinks(rng, shape, kinks=(0.0, 6.0)):
    x = rng.normal(0.0, 2.0, size=shape)
    for k in kinks:
        close = np.abs(x - k) < KINK_MARGIN
        x[close] += 4 * KINK_MARGIN
    return x


def _case_conv2d(rng):
    k = int(rng.choice([1, 3, 5]))
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    stride = int(rng.choice([1, 2]))
    padding = "same" if rng.random() < 0.5 else "valid"
    h = int(rng.integers(k, k + 4))
    w = int(rng.integers(k, k + 4))
    op = ops.Conv2D(rng.normal(0, 1, (k, k, cin, cout)),
                    rng.normal(0, 1, (cout,)), stride, padding)
    x = rng.normal(0, 1, (2, h, w, cin))
    return op, [x]


def _case_depthwise(rng):
    k = int(rng.choice([3, 5]))
    c = int(rng.integers(1, 4))
    stride = int(rng.choice([1, 2]))
    padding = "same" if rng.random() < 0.5 else "valid"
    h = int(rng.integers(k, k + 4))
    op = ops.DepthwiseConv2D(rng.normal(0, 1, (k, k, c, 1)),
                             rng.normal(0, 1, (c,)), stride, padding)
    x = rng.normal(0, 1, (2, h, h, c))
    return op, [x]


def _case_batchnorm(rng):
    c = int(rng.integers(1, 5))
    op = ops.BatchNorm(
        gamma=rng.normal(1, 0.2, (c,)),
        beta=rng.normal(0, 0.2, (c,)),
        running_mean=np.zeros(c),
        running_var=np.ones(c),
    )
    x = rng.normal(0, 1, (2, 3, 3, c))
    return op, [x]


def _case_relu(rng):
    op = ops.Activation("relu")
    return op, [_away_from_kinks(rng, (2, 4, 4, 3))]


def _case_relu6(rng):
    op = ops.Activation("relu6")
    return op, [_away_from_kinks(rng, (2, 4, 4, 3))]


def _case_maxpool(rng):
    op = ops.Pool("max", window=int(rng.choice([2, 3])),
                  stride=int(rng.choice([1, 2])),
                  padding="same" if rng.random() < 0.5 else "valid")
    # well-separated values keep the argmax stable under the FD probe
    x = rng.permutation(2 * 5 * 5 * 2).astype(np.float64).reshape(2, 5, 5, 2)
    return op, [x * 0.37]


def _case_avgpool(rng):
    op = ops.Pool("avg", window=int(rng.choice([2, 3])),
                  stride=int(rng.choice([1, 2])),
                  padding="same" if rng.random() < 0.5 else "valid")
    return op, [rng.normal(0, 1, (2, 5, 5, 2))]


def _case_global_avg(rng):
    return ops.Pool("global_avg"), [rng.normal(0, 1, (2, 4, 5, 3))]


def _case_concat(rng):
    op = ops.ConcatChannels()
    n_branches = int(rng.integers(2, 5))
    xs = [rng.normal(0, 1, (2, 3, 3, int(rng.integers(1, 4)))) for _ in range(n_branches)]
    return op, xs


def _case_fc(rng):
    din, dout = int(rng.integers(2, 8)), int(rng.integers(2, 8))
    op = ops.FullyConnected(rng.normal(0, 1, (din, dout)), rng.normal(0, 1, (dout,)))
    return op, [rng.normal(0, 1, (3, din))]


def _case_add(rng):
    op = ops.Add()
    shape = (2, 3, 3, 2)
    return op, [rng.normal(0, 1, shape), rng.normal(0, 1, shape)]


def _case_flatten(rng):
    return ops.Flatten(), [rng.normal(0, 1, (2, 3, 3, 2))]


CASES = {
    "conv2d": _case_conv2d,
    "depthwise_conv2d": _case_depthwise,
    "batchnorm": _case_batchnorm,
    "relu": _case_relu,
    "relu6": _case_relu6,
    "max_pool": _case_maxpool,
    "avg_pool": _case_avgpool,
    "global_avg_pool": _case_global_avg,
    "concat_channels": _case_concat,
    "fully_connected": _case_fc,
    "add": _case_add,
    "flatten": _case_flatten,
}


def check_softmax_cross_entropy(rng) -> float:
    """FD check of the combined softmax + cross-entropy gradient."""
    n, k = 3, 4
    logits = rng.normal(0, 2, (n, k))
    labels = np.zeros((n, k))
    labels[np.arange(n), rng.integers(0, k, n)] = 1
    _, probs = ops.softmax_cross_entropy(logits, labels)
    analytic = ops.softmax_cross_entropy_grad(probs, labels)
    num = np.empty_like(logits)
    flat = logits.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + H
        lp, _ = ops.softmax_cross_entropy(logits, labels)
        flat[i] = keep - H
        lm, _ = ops.softmax_cross_entropy(logits, labels)
        flat[i] = keep
        num.reshape(-1)[i] = (lp - lm) / (2 * H)
    return _relative(analytic, num)


@dataclass
class OpReport:
    name: str
    max_rel_err: float
    instances: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE


def run_suite(seed: int = 0, instances: int = 20) -> list[OpReport]:
    """FD-check every op on `instances` random instances each."""
    reports = []
    for name, case in CASES.items():
        rng = np.random.default_rng([seed, abs(hash(name)) % (2**31)])
        worst = 0.0
        for _ in range(instances):
            op, xs = case(rng)
            worst = max(worst, check_op(op, xs))
        reports.append(OpReport(name, worst, instances))
    rng = np.random.default_rng([seed, 999983])
    worst = max(check_softmax_cross_entropy(rng) for _ in range(instances))
    reports.append(OpReport("softmax_cross_entropy", worst, instances))
    return reports


def format_table(reports: list[OpReport]) -> str:
    lines = [f"{'op':<24}{'max_rel_err':>14}{'tolerance':>12}  status"]
    for r in reports:
        status = "pass" if r.passed else "FAIL"
        lines.append(f"{r.name:<24}{r.max_rel_err:>14.3e}{TOLERANCE:>12.1e}  {status}")
    return "\n".join(lines)
