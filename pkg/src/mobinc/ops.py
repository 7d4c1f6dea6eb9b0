"""Forward and reverse-mode implementations of every layer kind in the network.

Each op is a small parameter-carrying object with a pure ``forward`` that
returns (output, cache) and a ``backward`` that maps the output gradient
plus that cache to input gradients and per-parameter gradients. Ops never
mutate their inputs; the only stateful update is the batch-norm running
statistics, confined to train-mode forward.

Convolution is cross-correlation (no kernel flip). ReLU-family subgradient
at kinks is 0. Average pooling divides by the full window size kh*kw with
zeros outside the image, which makes it exactly a depthwise convolution
with a uniform kernel.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, ValidationError
from .tensor import (
    col2im,
    conv_output_size,
    im2col,
    pad_amounts,
    sliding_patches,
)

Mode = str  # "train" | "infer"

BN_MOMENTUM = 0.9
BN_EPSILON = 1e-5

_ALLOWED_KERNELS = (1, 3, 5)


def _check_kernel(kh: int, kw: int) -> None:
    if kh not in _ALLOWED_KERNELS or kw not in _ALLOWED_KERNELS:
        raise ValidationError(f"kernel sides must be one of {_ALLOWED_KERNELS}, got {(kh, kw)}")


class Op:
    """Base layer op. Subclasses set ``kind`` and override the three hooks."""

    kind = "op"
    n_inputs = 1

    def param_arrays(self) -> dict[str, np.ndarray]:
        """Trainable tensors, keyed by local name."""
        return {}

    def buffer_arrays(self) -> dict[str, np.ndarray]:
        """Non-trainable state tensors (batch-norm running stats)."""
        return {}

    def forward(self, xs: list[np.ndarray], mode: Mode):
        raise NotImplementedError

    def backward(self, grad, cache, need_input, need_params):
        raise NotImplementedError


class Input(Op):
    kind = "input"

    def forward(self, xs, mode):
        return xs[0], None

    def backward(self, grad, cache, need_input, need_params):
        return [grad], {}


class Conv2D(Op):
    """2-D cross-correlation over NHWC input, lowered to im2col + matmul.

    weights: (kh, kw, cin, cout); bias: (cout,) or None.
    """

    kind = "conv2d"

    def __init__(self, weights: np.ndarray, bias, stride: int, padding: str):
        kh, kw, cin, cout = weights.shape
        _check_kernel(kh, kw)
        if cout < 1:
            raise ValidationError("conv2d needs cout >= 1")
        if bias is not None and bias.shape != (cout,):
            raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)")
        self.weights = weights
        self.bias = bias
        self.stride = stride
        self.padding = padding

    def param_arrays(self):
        out = {"weights": self.weights}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def forward(self, xs, mode):
        (x,) = xs
        kh, kw, cin, cout = self.weights.shape
        if x.ndim != 4 or x.shape[3] != cin:
            raise ShapeError(
                f"conv2d expects {cin} input channels, got input shape {x.shape}"
            )
        n, h, w, _ = x.shape
        oh = conv_output_size(h, kh, self.stride, self.padding)
        ow = conv_output_size(w, kw, self.stride, self.padding)
        if kh == 1 and kw == 1:
            # 1x1: im2col is a (possibly strided) reshape, skip the copy
            cols = x[:, :: self.stride, :: self.stride, :].reshape(-1, cin)
        else:
            cols = im2col(x, (kh, kw), self.stride, self.padding)
        y = cols @ self.weights.reshape(-1, cout)
        if self.bias is not None:
            y += self.bias
        y = y.reshape(n, oh, ow, cout)
        cache = (cols, x.shape)
        return y, cache

    def backward(self, grad, cache, need_input, need_params):
        cols, x_shape = cache
        kh, kw, cin, cout = self.weights.shape
        n, h, w, _ = x_shape
        g2 = grad.reshape(-1, cout)
        param_grads = {}
        if need_params:
            param_grads["weights"] = (cols.T @ g2).reshape(self.weights.shape)
            if self.bias is not None:
                param_grads["bias"] = g2.sum(axis=0)
        grad_x = None
        if need_input[0]:
            gcols = g2 @ self.weights.reshape(-1, cout).T
            if kh == 1 and kw == 1:
                if self.stride == 1:
                    grad_x = gcols.reshape(x_shape)
                else:
                    oh = conv_output_size(h, 1, self.stride, self.padding)
                    ow = conv_output_size(w, 1, self.stride, self.padding)
                    grad_x = np.zeros(x_shape, dtype=grad.dtype)
                    grad_x[:, :: self.stride, :: self.stride, :] = gcols.reshape(
                        n, oh, ow, cin
                    )
            else:
                grad_x = col2im(gcols, x_shape, (kh, kw), self.stride, self.padding)
        return [grad_x], param_grads


class DepthwiseConv2D(Op):
    """Per-channel 2-D cross-correlation; channel multiplier fixed at 1.

    weights: (kh, kw, cin, 1).
    """

    kind = "depthwise_conv2d"

    def __init__(self, weights: np.ndarray, bias, stride: int, padding: str):
        kh, kw, cin, mult = weights.shape
        _check_kernel(kh, kw)
        if mult != 1:
            raise ValidationError("depthwise channel multiplier is fixed at 1")
        if bias is not None and bias.shape != (cin,):
            raise ShapeError(f"depthwise bias shape {bias.shape} != ({cin},)")
        self.weights = weights
        self.bias = bias
        self.stride = stride
        self.padding = padding

    def param_arrays(self):
        out = {"weights": self.weights}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def _padded(self, x):
        kh, kw, cin, _ = self.weights.shape
        n, h, w, c = x.shape
        pt, pb = pad_amounts(h, kh, self.stride, self.padding)
        pl, pr = pad_amounts(w, kw, self.stride, self.padding)
        if pt or pb or pl or pr:
            return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))), (pt, pl)
        return x, (0, 0)

    def forward(self, xs, mode):
        (x,) = xs
        kh, kw, cin, _ = self.weights.shape
        if x.ndim != 4 or x.shape[3] != cin:
            raise ShapeError(
                f"depthwise_conv2d expects {cin} input channels, got input shape {x.shape}"
            )
        n, h, w, c = x.shape
        oh = conv_output_size(h, kh, self.stride, self.padding)
        ow = conv_output_size(w, kw, self.stride, self.padding)
        xp, _ = self._padded(x)
        s = self.stride
        wk = self.weights[:, :, :, 0]
        y = np.zeros((n, oh, ow, c), dtype=x.dtype)
        tmp = np.empty_like(y)
        # accumulate one kernel tap at a time; fixed (a, b) order keeps the
        # float reduction deterministic
        for a in range(kh):
            for b in range(kw):
                sl = xp[:, a : a + s * (oh - 1) + 1 : s, b : b + s * (ow - 1) + 1 : s, :]
                np.multiply(sl, wk[a, b], out=tmp)
                y += tmp
        if self.bias is not None:
            y += self.bias
        return y, (xp, x.shape)

    def backward(self, grad, cache, need_input, need_params):
        xp, x_shape = cache
        kh, kw, cin, _ = self.weights.shape
        n, h, w, c = x_shape
        s = self.stride
        oh, ow = grad.shape[1], grad.shape[2]
        param_grads = {}
        if need_params:
            gw = np.zeros_like(self.weights)
            for a in range(kh):
                for b in range(kw):
                    sl = xp[:, a : a + s * (oh - 1) + 1 : s, b : b + s * (ow - 1) + 1 : s, :]
                    gw[a, b, :, 0] = np.einsum("nhwc,nhwc->c", sl, grad)
            param_grads["weights"] = gw
            if self.bias is not None:
                param_grads["bias"] = grad.sum(axis=(0, 1, 2))
        grad_x = None
        if need_input[0]:
            gxp = np.zeros_like(xp)
            wk = self.weights[:, :, :, 0]
            tmp = np.empty_like(grad)
            for a in range(kh):
                for b in range(kw):
                    np.multiply(grad, wk[a, b], out=tmp)
                    gxp[:, a : a + s * (oh - 1) + 1 : s, b : b + s * (ow - 1) + 1 : s, :] += tmp
            pt, pb = pad_amounts(h, kh, s, self.padding)
            pl, pr = pad_amounts(w, kw, s, self.padding)
            grad_x = gxp[:, pt : pt + h, pl : pl + w, :]
        return [grad_x], param_grads


class BatchNorm(Op):
    """Per-channel batch normalization over the N, H, W axes of NHWC input.

    Train mode normalizes with batch statistics (biased variance) and
    updates running stats with exponential moving average; infer mode is a
    pure per-channel affine map built from the running stats.
    """

    kind = "batchnorm"

    def __init__(self, gamma, beta, running_mean, running_var,
                 momentum: float = BN_MOMENTUM, epsilon: float = BN_EPSILON):
        if not (0.0 < momentum < 1.0):
            raise ValidationError(f"batchnorm momentum must be in (0,1), got {momentum}")
        if epsilon <= 0.0:
            raise ValidationError(f"batchnorm epsilon must be > 0, got {epsilon}")
        if np.any(running_var < 0):
            raise ValidationError("batchnorm running_var entries must be >= 0")
        self.gamma = gamma
        self.beta = beta
        self.running_mean = running_mean
        self.running_var = running_var
        self.momentum = momentum
        self.epsilon = epsilon

    def param_arrays(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffer_arrays(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, xs, mode):
        (x,) = xs
        c = self.gamma.shape[0]
        if x.ndim != 4 or x.shape[3] != c:
            raise ShapeError(f"batchnorm expects {c} channels, got input shape {x.shape}")
        m_count = x.shape[0] * x.shape[1] * x.shape[2]
        if mode == "train":
            mean = x.mean(axis=(0, 1, 2))
            # biased variance via E[x^2] - E[x]^2; einsum avoids a full x*x temp
            sq_mean = np.einsum("nhwc,nhwc->c", x, x) / x.dtype.type(m_count)
            var = np.maximum(sq_mean - mean * mean, 0)
            m = x.dtype.type(self.momentum)
            self.running_mean *= m
            self.running_mean += (1 - m) * mean
            self.running_var *= m
            self.running_var += (1 - m) * var
        else:
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + x.dtype.type(self.epsilon))
        scale = self.gamma * inv_std
        y = x * scale + (self.beta - mean * scale)
        cache = (x, mean, inv_std, mode)
        return y, cache

    def backward(self, grad, cache, need_input, need_params):
        x, mean, inv_std, mode = cache
        xhat = (x - mean) * inv_std
        param_grads = {}
        if need_params:
            param_grads["gamma"] = np.einsum("nhwc,nhwc->c", grad, xhat)
            param_grads["beta"] = grad.sum(axis=(0, 1, 2))
        grad_x = None
        if need_input[0]:
            if mode == "train":
                m_count = grad.shape[0] * grad.shape[1] * grad.shape[2]
                dmean = grad.mean(axis=(0, 1, 2))
                dproj = np.einsum("nhwc,nhwc->c", grad, xhat) / grad.dtype.type(m_count)
                grad_x = (grad - dmean - xhat * dproj) * (self.gamma * inv_std)
            else:
                grad_x = grad * (self.gamma * inv_std)
        return [grad_x], param_grads


class Activation(Op):
    """Elementwise relu or relu6; subgradient 0 at the kinks."""

    kind = "activation"

    def __init__(self, fn: str):
        if fn not in ("relu", "relu6"):
            raise ValidationError(f"unknown activation {fn!r}")
        self.fn = fn

    def forward(self, xs, mode):
        (x,) = xs
        if self.fn == "relu":
            y = np.maximum(x, 0)
        else:
            y = np.clip(x, 0, 6)
        # the output determines the pass-through mask: strictly inside (0, 6)
        return y, y

    def backward(self, grad, cache, need_input, need_params):
        if not need_input[0]:
            return [None], {}
        y = cache
        mask = (y > 0) & (y < 6) if self.fn == "relu6" else y > 0
        return [grad * mask], {}


class Pool(Op):
    """max / avg / global_avg pooling over NHWC input."""

    kind = "pool"

    def __init__(self, fn: str, window: int = 0, stride: int = 1, padding: str = "valid"):
        if fn not in ("max", "avg", "global_avg"):
            raise ValidationError(f"unknown pool kind {fn!r}")
        if fn != "global_avg" and window < 1:
            raise ValidationError("pool window must be >= 1")
        self.fn = fn
        self.window = window
        self.stride = stride
        self.padding = padding

    def _padded(self, x, fill):
        k = self.window
        n, h, w, c = x.shape
        pt, pb = pad_amounts(h, k, self.stride, self.padding)
        pl, pr = pad_amounts(w, k, self.stride, self.padding)
        if pt or pb or pl or pr:
            xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=fill)
        else:
            xp = x
        return xp, (pt, pl)

    def forward(self, xs, mode):
        (x,) = xs
        if x.ndim != 4:
            raise ShapeError(f"pool expects NHWC input, got shape {x.shape}")
        n, h, w, c = x.shape
        if self.fn == "global_avg":
            y = x.mean(axis=(1, 2), keepdims=True)
            return y, (x.shape,)
        k = self.window
        oh = conv_output_size(h, k, self.stride, self.padding)
        ow = conv_output_size(w, k, self.stride, self.padding)
        if self.fn == "max":
            xp, off = self._padded(x, -np.inf if x.dtype.kind == "f" else 0)
            patches = sliding_patches(xp, k, k, self.stride).reshape(n, oh, ow, k * k, c)
            arg = patches.argmax(axis=3)
            y = np.take_along_axis(patches, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
            return y, (x.shape, xp.shape, arg, off)
        # avg: zero padding, divide by full window size
        xp, off = self._padded(x, 0)
        patches = sliding_patches(xp, k, k, self.stride)
        y = patches.sum(axis=(3, 4)) / np.array(k * k, dtype=x.dtype)
        return y, (x.shape, xp.shape, off)

    def backward(self, grad, cache, need_input, need_params):
        if not need_input[0]:
            return [None], {}
        if self.fn == "global_avg":
            (x_shape,) = cache
            n, h, w, c = x_shape
            grad_x = np.broadcast_to(grad / np.array(h * w, dtype=grad.dtype), x_shape).copy()
            return [grad_x], {}
        k, s = self.window, self.stride
        if self.fn == "max":
            x_shape, xp_shape, arg, (pt, pl) = cache
            n, h, w, c = x_shape
            oh, ow = arg.shape[1], arg.shape[2]
            gxp = np.zeros(xp_shape, dtype=grad.dtype)
            for idx in range(k * k):
                a, b = divmod(idx, k)
                sel = (arg == idx) * grad
                gxp[:, a : a + s * (oh - 1) + 1 : s, b : b + s * (ow - 1) + 1 : s, :] += sel
            return [gxp[:, pt : pt + h, pl : pl + w, :]], {}
        x_shape, xp_shape, (pt, pl) = cache
        n, h, w, c = x_shape
        oh, ow = grad.shape[1], grad.shape[2]
        gxp = np.zeros(xp_shape, dtype=grad.dtype)
        share = grad / np.array(k * k, dtype=grad.dtype)
        for a in range(k):
            for b in range(k):
                gxp[:, a : a + s * (oh - 1) + 1 : s, b : b + s * (ow - 1) + 1 : s, :] += share
        return [gxp[:, pt : pt + h, pl : pl + w, :]], {}


class ConcatChannels(Op):
    """Concatenate NHWC tensors along the channel axis, in argument order."""

    kind = "concat_channels"
    n_inputs = None  # variadic

    def forward(self, xs, mode):
        base = xs[0].shape[:3]
        for x in xs[1:]:
            if x.shape[:3] != base:
                raise ShapeError(
                    f"concat_channels inputs disagree on N,H,W: {xs[0].shape} vs {x.shape}"
                )
        y = np.concatenate(xs, axis=3)
        return y, tuple(x.shape[3] for x in xs)

    def backward(self, grad, cache, need_input, need_params):
        grads = []
        off = 0
        for want, c in zip(need_input, cache):
            grads.append(grad[:, :, :, off : off + c].copy() if want else None)
            off += c
        return grads, {}


class FullyConnected(Op):
    """Affine map on (n, din) input: x @ w + b."""

    kind = "fully_connected"

    def __init__(self, weights: np.ndarray, bias: np.ndarray):
        if weights.ndim != 2:
            raise ShapeError(f"fully_connected weights must be 2-D, got {weights.shape}")
        if bias.shape != (weights.shape[1],):
            raise ShapeError(f"fully_connected bias shape {bias.shape} != ({weights.shape[1]},)")
        self.weights = weights
        self.bias = bias

    def param_arrays(self):
        return {"weights": self.weights, "bias": self.bias}

    def forward(self, xs, mode):
        (x,) = xs
        if x.ndim != 2 or x.shape[1] != self.weights.shape[0]:
            raise ShapeError(
                f"fully_connected expects (n, {self.weights.shape[0]}), got {x.shape}"
            )
        return x @ self.weights + self.bias, x

    def backward(self, grad, cache, need_input, need_params):
        x = cache
        param_grads = {}
        if need_params:
            param_grads["weights"] = x.T @ grad
            param_grads["bias"] = grad.sum(axis=0)
        grad_x = grad @ self.weights.T if need_input[0] else None
        return [grad_x], param_grads


class Add(Op):
    """Elementwise sum of two same-shape tensors (bottleneck residual)."""

    kind = "add"
    n_inputs = 2

    def forward(self, xs, mode):
        a, b = xs
        if a.shape != b.shape:
            raise ShapeError(f"add inputs differ in shape: {a.shape} vs {b.shape}")
        return a + b, None

    def backward(self, grad, cache, need_input, need_params):
        return [grad if need_input[0] else None, grad if need_input[1] else None], {}


class Flatten(Op):
    """Collapse all non-batch axes: (n, ...) -> (n, prod)."""

    kind = "flatten"

    def forward(self, xs, mode):
        (x,) = xs
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad, cache, need_input, need_params):
        grad_x = grad.reshape(cache) if need_input[0] else None
        return [grad_x], {}


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by max subtraction."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_one_hot(labels: np.ndarray) -> None:
    if labels.ndim != 2 or labels.shape[1] < 2:
        raise ValidationError(f"labels must be (n, k>=2) one-hot rows, got {labels.shape}")
    ok = np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=1) == 1)
    if not ok:
        raise ValidationError("every label row must be exactly one-hot")


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean categorical cross-entropy over the batch.

    Returns (loss, probs). probs rows sum to 1; loss is the mean of
    -log prob[true class].
    """
    _check_one_hot(labels)
    if logits.shape != labels.shape:
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} differ")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    true_logit = (shifted * labels).sum(axis=1)
    loss = float(np.mean(log_z - true_logit))
    probs = softmax(logits)
    return loss, probs


def softmax_cross_entropy_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of mean cross-entropy w.r.t. logits: (probs - labels) / n."""
    return (probs - labels) / np.array(probs.shape[0], dtype=probs.dtype)
