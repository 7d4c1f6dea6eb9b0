"""Synthetic 4-class image generators for tests, demos, and CLI runs.

Two families:

* color blobs: one saturated class-specific blob on a noisy background,
  separable almost linearly; good for fast end-to-end CLI checks.
* leaf proxy: mottled green leaf-like backgrounds where classes differ by
  lesion geometry (round rust pustules, rectangular gray strips, large
  cigar-shaped blight ellipses, or nothing). Harder than blobs and meant
  for learning-signal checks when the real field photos are unavailable.

Images are written as 256x256 RGB PNGs under <root>/<class_name>/.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .data import CLASS_NAMES

SIZE = 256

_BLOB_COLORS = {
    "healthy": (60, 190, 70),
    "northern_leaf_blight": (200, 170, 60),
    "gray_leaf_spot": (150, 150, 160),
    "common_rust": (170, 60, 40),
}


def _save(root: Path, label: str, index: int, img: np.ndarray) -> Path:
    out_dir = root / label
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{label}_{index:04d}.png"
    Image.fromarray(img.astype(np.uint8), "RGB").save(path)
    return path


def _noise_background(rng, low=20, high=60):
    base = rng.integers(low, high, size=(SIZE, SIZE, 3))
    return base.astype(np.float64)


def make_color_blob_dataset(root: str | Path, per_class: int = 25, seed: int = 0) -> Path:
    """One big class-colored disk per image on a dim noisy background."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    ii, jj = np.mgrid[0:SIZE, 0:SIZE]
    for label in CLASS_NAMES:
        color = np.array(_BLOB_COLORS[label], dtype=np.float64)
        for idx in range(per_class):
            img = _noise_background(rng)
            ci = rng.uniform(0.3, 0.7) * SIZE
            cj = rng.uniform(0.3, 0.7) * SIZE
            radius = rng.uniform(0.18, 0.3) * SIZE
            mask = (ii - ci) ** 2 + (jj - cj) ** 2 < radius**2
            jitter = rng.normal(0, 12, size=3)
            img[mask] = np.clip(color + jitter, 0, 255)
            img += rng.normal(0, 6, size=img.shape)
            _save(root, label, idx, np.clip(img, 0, 255))
    return root


def _leaf_base(rng):
    """Mottled green background with faint vein streaks."""
    g = rng.uniform(95, 150)
    base = np.empty((SIZE, SIZE, 3), dtype=np.float64)
    base[:, :, 0] = g * rng.uniform(0.45, 0.62)
    base[:, :, 1] = g
    base[:, :, 2] = g * rng.uniform(0.25, 0.4)
    # low-frequency blotching
    coarse = rng.normal(0, 1, size=(8, 8))
    blotch = np.kron(coarse, np.ones((SIZE // 8, SIZE // 8))) * rng.uniform(4, 10)
    base += blotch[:, :, None]
    # vein streaks roughly along one axis
    n_veins = int(rng.integers(4, 9))
    for _ in range(n_veins):
        j = int(rng.integers(0, SIZE))
        width = int(rng.integers(1, 3))
        base[:, j : j + width] *= rng.uniform(1.05, 1.15)
    return base


def _ellipse_mask(ii, jj, ci, cj, ai, aj, angle):
    cos, sin = np.cos(angle), np.sin(angle)
    u = (ii - ci) * cos + (jj - cj) * sin
    v = -(ii - ci) * sin + (jj - cj) * cos
    return (u / ai) ** 2 + (v / aj) ** 2 < 1.0


def make_leaf_dataset(root: str | Path, per_class: int = 100, seed: int = 0) -> Path:
    """4-class leaf-proxy dataset where classes differ by lesion pattern."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    ii, jj = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    for label in CLASS_NAMES:
        for idx in range(per_class):
            img = _leaf_base(rng)
            if label == "common_rust":
                # many small dark reddish pustules
                for _ in range(int(rng.integers(15, 40))):
                    ci, cj = rng.uniform(8, SIZE - 8, size=2)
                    r = rng.uniform(2.0, 5.5)
                    mask = (ii - ci) ** 2 + (jj - cj) ** 2 < r**2
                    color = np.array([rng.uniform(105, 150), rng.uniform(45, 75),
                                      rng.uniform(25, 50)])
                    img[mask] = color
            elif label == "gray_leaf_spot":
                # narrow gray-tan strips running along the vein axis
                for _ in range(int(rng.integers(4, 10))):
                    top = int(rng.integers(0, SIZE - 60))
                    left = int(rng.integers(0, SIZE - 10))
                    length = int(rng.integers(40, 110))
                    width = int(rng.integers(4, 9))
                    tone = rng.uniform(135, 175)
                    img[top : top + length, left : left + width] = [
                        tone, tone * rng.uniform(0.92, 1.0), tone * rng.uniform(0.7, 0.85)
                    ]
            elif label == "northern_leaf_blight":
                # a few large cigar-shaped tan lesions
                for _ in range(int(rng.integers(1, 4))):
                    ci, cj = rng.uniform(40, SIZE - 40, size=2)
                    ai = rng.uniform(45, 90)
                    aj = rng.uniform(10, 20)
                    angle = rng.uniform(-0.5, 0.5)
                    mask = _ellipse_mask(ii, jj, ci, cj, ai, aj, angle)
                    img[mask] = [rng.uniform(150, 190), rng.uniform(130, 165),
                                 rng.uniform(80, 110)]
            img += rng.normal(0, 7, size=img.shape)
            _save(root, label, idx, np.clip(img, 0, 255))
    return root
