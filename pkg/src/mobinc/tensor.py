"""Dense tensor substrate: shape algebra, matmul, and im2col/col2im.

Tensors are plain numpy arrays in row-major (C) order, NHWC layout for
images, float32 for training and inference. Gradient checks rebuild the
same ops in float64, so everything here is dtype-polymorphic.

"same" padding follows the convention oh = ceil(h / stride) with the
extra pixel on the bottom/right when the total padding is odd.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError

FLOAT = np.float32


@dataclass(frozen=True)
class Shape4:
    """NHWC shape of an activation tensor."""

    n: int
    h: int
    w: int
    c: int

    def __post_init__(self):
        for name, value in (("n", self.n), ("h", self.h), ("w", self.w), ("c", self.c)):
            if value < 1:
                raise ValidationError(f"Shape4.{name} must be positive, got {value}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.n, self.h, self.w, self.c)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Strict 2-D matrix product with explicit shape validation."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def pad_amounts(size: int, kernel: int, stride: int, padding: str) -> tuple[int, int]:
    """Per-axis (before, after) zero padding for the given mode."""
    if padding == "valid":
        return (0, 0)
    if padding == "same":
        out = math.ceil(size / stride)
        total = max((out - 1) * stride + kernel - size, 0)
        before = total // 2
        return (before, total - before)
    raise ValidationError(f"unknown padding mode {padding!r}")


def conv_output_size(size: int, kernel: int, stride: int, padding: str) -> int:
    """Spatial output extent for one axis."""
    if padding == "same":
        return math.ceil(size / stride)
    if padding == "valid":
        if kernel > size:
            raise ShapeError(
                f"kernel extent {kernel} exceeds input extent {size} under 'valid' padding"
            )
        return (size - kernel) // stride + 1
    raise ValidationError(f"unknown padding mode {padding!r}")


def _check_conv_args(kernel: tuple[int, int], stride: int) -> None:
    kh, kw = kernel
    if kh < 1 or kw < 1 or stride < 1:
        raise ValidationError(f"kernel {kernel} and stride {stride} must all be >= 1")


def sliding_patches(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Read-only strided view (n, oh, ow, kh, kw, c) over a padded NHWC array."""
    n, hp, wp, c = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    sn, sh, sw, sc = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, oh, ow, kh, kw, c),
        strides=(sn, stride * sh, stride * sw, sh, sw, sc),
        writeable=False,
    )


def im2col(
    x: np.ndarray, kernel: tuple[int, int], stride: int, padding: str
) -> np.ndarray:
    """Lower NHWC input patches to a matrix of shape (n*oh*ow, kh*kw*c).

    Row r holds the receptive field of output position r (row-major over
    n, oh, ow); columns are ordered (kh, kw, c) so a weight tensor of shape
    (kh, kw, cin, cout) reshaped to (kh*kw*cin, cout) multiplies directly.
    Out-of-bounds samples are zero.
    """
    if x.ndim != 4:
        raise ShapeError(f"im2col expects NHWC input, got shape {x.shape}")
    _check_conv_args(kernel, stride)
    kh, kw = kernel
    n, h, w, c = x.shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    (pt, pb) = pad_amounts(h, kh, stride, padding)
    (pl, pr) = pad_amounts(w, kw, stride, padding)
    if pt or pb or pl or pr:
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    else:
        xp = x
    patches = sliding_patches(xp, kh, kw, stride)
    return np.ascontiguousarray(patches).reshape(n * oh * ow, kh * kw * c)


def col2im(
    cols: np.ndarray,
    x_shape: tuple[int, int, int, int],
    kernel: tuple[int, int],
    stride: int,
    padding: str,
) -> np.ndarray:
    """Scatter-add im2col columns back onto the (unpadded) input grid.

    Overlapping patches accumulate, so col2im(im2col(x)) scales each pixel
    by the number of patches covering it.
    """
    _check_conv_args(kernel, stride)
    kh, kw = kernel
    n, h, w, c = x_shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    if cols.shape != (n * oh * ow, kh * kw * c):
        raise ShapeError(
            f"col2im expects columns of shape {(n * oh * ow, kh * kw * c)}, got {cols.shape}"
        )
    (pt, pb) = pad_amounts(h, kh, stride, padding)
    (pl, pr) = pad_amounts(w, kw, stride, padding)
    xp = np.zeros((n, h + pt + pb, w + pl + pr, c), dtype=cols.dtype)
    blocks = cols.reshape(n, oh, ow, kh, kw, c)
    for a in range(kh):
        for b in range(kw):
            xp[:, a : a + stride * (oh - 1) + 1 : stride,
               b : b + stride * (ow - 1) + 1 : stride, :] += blocks[:, :, :, a, b, :]
    return xp[:, pt : pt + h, pl : pl + w, :]
