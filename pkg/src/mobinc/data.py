"""Maize-leaf data pipeline: manifesting, deterministic stratified splits,
preprocessing to 224x224 tensors in [-1, 1], augmentation, and
minority-class rebalancing.

Dataset layout on disk is ``<root>/<class_name>/<image files>`` with the
class folders named exactly healthy, northern_leaf_blight, gray_leaf_spot,
common_rust. The manifest is persisted as CSV with header
``path,label,split``, UTF-8, LF line endings, paths relative to the root.

Every random choice flows from explicit integer seeds through
numpy's PCG64, so identical seeds reproduce identical tensor streams.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError, ImageFormatError, ValidationError
from .tensor import FLOAT

CLASS_NAMES = ("healthy", "northern_leaf_blight", "gray_leaf_spot", "common_rust")
CLASS_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}
SPLITS = ("train", "val", "test")
IMAGE_SIZE = 224
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".ppm")
DEFAULT_RATIOS = (0.70, 0.10, 0.20)


@dataclass(frozen=True)
class ManifestRecord:
    path: str  # POSIX-style, relative to the dataset root
    label: str
    split: str


@dataclass
class DatasetManifest:
    root: Path
    records: list[ManifestRecord]
    seed: int

    def split_records(self, split: str) -> list[ManifestRecord]:
        if split not in SPLITS:
            raise ValidationError(f"unknown split {split!r}")
        return [r for r in self.records if r.split == split]

    def class_counts(self, split: str | None = None) -> dict[str, int]:
        counts = {name: 0 for name in CLASS_NAMES}
        for r in self.records:
            if split is None or r.split == split:
                counts[r.label] += 1
        return counts

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["path", "label", "split"])
            for r in self.records:
                writer.writerow([r.path, r.label, r.split])

    @classmethod
    def load_csv(cls, path: str | Path, root: str | Path | None = None,
                 seed: int = 0) -> "DatasetManifest":
        path = Path(path)
        records = []
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["path", "label", "split"]:
                raise DataError(f"{path}: manifest header must be path,label,split")
            for row in reader:
                if len(row) != 3:
                    raise DataError(f"{path}: malformed manifest row {row!r}")
                rel, label, split = row
                if label not in CLASS_NAMES:
                    raise DataError(f"{path}: unknown label {label!r}")
                if split not in SPLITS:
                    raise DataError(f"{path}: unknown split {split!r}")
                records.append(ManifestRecord(rel, label, split))
        return cls(Path(root) if root is not None else path.parent, records, seed)


def build_manifest(
    root_dir: str | Path,
    ratios: tuple[float, float, float] = DEFAULT_RATIOS,
    seed: int = 0,
) -> DatasetManifest:
    """Stratified per-class 70/10/20 split with the floor rule.

    Per class: train gets floor(r_train * n), val gets floor(r_val * n),
    test gets the remainder. Shuffling is per class from `seed`.
    """
    root = Path(root_dir)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    for sub in sorted(p.name for p in root.iterdir() if p.is_dir()):
        if sub not in CLASS_NAMES:
            raise DataError(
                f"unknown class folder {sub!r}; expected one of {', '.join(CLASS_NAMES)}"
            )
    rng = np.random.default_rng(seed)
    records: list[ManifestRecord] = []
    for label in CLASS_NAMES:
        class_dir = root / label
        files = sorted(
            p.name for p in class_dir.iterdir()
            if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
        ) if class_dir.is_dir() else []
        if not files:
            raise ValidationError(f"class {label!r} has no images under {class_dir}")
        order = rng.permutation(len(files))
        n = len(files)
        n_train = math.floor(ratios[0] * n)
        n_val = math.floor(ratios[1] * n)
        for pos, idx in enumerate(order):
            split = "train" if pos < n_train else "val" if pos < n_train + n_val else "test"
            records.append(ManifestRecord(f"{label}/{files[idx]}", label, split))
    return DatasetManifest(root, records, seed)


# ---------------------------------------------------------------------------
# image decoding and preprocessing


def load_image(path: str | Path) -> np.ndarray:
    """Decode an image file to an (h, w, 3) uint8 RGB array."""
    try:
        with Image.open(path) as img:
            if img.mode != "RGB":
                raise ImageFormatError(f"{path}: expected RGB image, got mode {img.mode!r}")
            return np.asarray(img, dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"unreadable image {path}: {exc}") from exc


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resize; identity on matching sizes."""
    h, w = img.shape[:2]
    img = img.astype(FLOAT, copy=False)
    if (h, w) == (out_h, out_w):
        return img.copy()
    si = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    sj = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    i0 = np.floor(si).astype(np.int64)
    j0 = np.floor(sj).astype(np.int64)
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    di = (si - i0).astype(FLOAT)[:, None, None]
    dj = (sj - j0).astype(FLOAT)[None, :, None]
    top = img[i0][:, j0] * (1 - dj) + img[i0][:, j1] * dj
    bot = img[i1][:, j0] * (1 - dj) + img[i1][:, j1] * dj
    return top * (1 - di) + bot * di


def to_unit_range(resized: np.ndarray) -> np.ndarray:
    """Map pixel values from [0, 255] to [-1, 1]."""
    return (resized / FLOAT(127.5) - FLOAT(1.0)).astype(FLOAT, copy=False)


def preprocess(image: np.ndarray) -> np.ndarray:
    """Resize a decoded RGB raster to 224x224 and map into [-1, 1].

    Returns a (1, 224, 224, 3) float32 tensor.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ImageFormatError(f"preprocess expects an (h, w, 3) RGB raster, got {image.shape}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise ImageFormatError("preprocess needs at least one pixel")
    resized = bilinear_resize(image, IMAGE_SIZE, IMAGE_SIZE)
    return to_unit_range(resized)[None]


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    """Per-op firing probabilities plus magnitude settings.

    Geometric ops use bilinear sampling with reflect padding; outputs stay
    224x224x3 within [-1, 1].
    """

    p_horizontal_flip: float = 0.0
    p_vertical_flip: float = 0.0
    p_rotate: float = 0.0
    p_shear: float = 0.0
    p_crop: float = 0.0
    p_translate: float = 0.0
    rotate_degrees: float = 15.0
    shear_degrees: float = 10.0
    crop_fraction: float = 0.9
    translate_fraction: float = 0.1

    def __post_init__(self):
        for name in ("p_horizontal_flip", "p_vertical_flip", "p_rotate",
                     "p_shear", "p_crop", "p_translate"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ValidationError(f"{name} must be in [0, 1], got {p}")
        if not (0.5 < self.crop_fraction <= 1.0):
            raise ValidationError(f"crop_fraction must be in (0.5, 1], got {self.crop_fraction}")

    @classmethod
    def default(cls) -> "AugmentPolicy":
        return cls(p_horizontal_flip=0.5, p_vertical_flip=0.5, p_rotate=0.5,
                   p_shear=0.5, p_crop=0.5, p_translate=0.5)

    @classmethod
    def none(cls) -> "AugmentPolicy":
        return cls()

    @property
    def any_enabled(self) -> bool:
        return any(getattr(self, f"p_{op}") > 0 for op in
                   ("horizontal_flip", "vertical_flip", "rotate", "shear", "crop", "translate"))


def _reflect_coords(t: np.ndarray, n: int) -> np.ndarray:
    """Mirror coordinates into [0, n-1] without repeating the edge sample."""
    if n == 1:
        return np.zeros_like(t)
    period = 2 * (n - 1)
    t = np.abs(t) % period
    return np.where(t > n - 1, period - t, t)


def _sample_bilinear_reflect(img: np.ndarray, si: np.ndarray, sj: np.ndarray) -> np.ndarray:
    """Sample img at float coords (si, sj) with bilinear blend, reflecting
    out-of-range neighbors back into the image."""
    h, w = img.shape[:2]
    i0 = np.floor(si)
    j0 = np.floor(sj)
    di = (si - i0).astype(img.dtype)[:, :, None]
    dj = (sj - j0).astype(img.dtype)[:, :, None]
    i0r = _reflect_coords(i0, h).astype(np.int64)
    i1r = _reflect_coords(i0 + 1, h).astype(np.int64)
    j0r = _reflect_coords(j0, w).astype(np.int64)
    j1r = _reflect_coords(j0 + 1, w).astype(np.int64)
    top = img[i0r, j0r] * (1 - dj) + img[i0r, j1r] * dj
    bot = img[i1r, j0r] * (1 - dj) + img[i1r, j1r] * dj
    return top * (1 - di) + bot * di


def _warp_affine(img: np.ndarray, inv: np.ndarray) -> np.ndarray:
    """Apply the inverse-mapping 2x3 affine [si; sj] = A @ [i; j; 1]."""
    h, w = img.shape[:2]
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    si = inv[0, 0] * ii + inv[0, 1] * jj + inv[0, 2]
    sj = inv[1, 0] * ii + inv[1, 1] * jj + inv[1, 2]
    return _sample_bilinear_reflect(img, si, sj)


def horizontal_flip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1, :].copy()


def vertical_flip(img: np.ndarray) -> np.ndarray:
    return img[::-1, :, :].copy()


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image center by `degrees` (counter-clockwise)."""
    h, w = img.shape[:2]
    ci, cj = (h - 1) / 2.0, (w - 1) / 2.0
    th = math.radians(degrees)
    cos, sin = math.cos(th), math.sin(th)
    # inverse mapping: rotate destination coords by -degrees around center
    inv = np.array([
        [cos, -sin, ci - cos * ci + sin * cj],
        [sin, cos, cj - sin * ci - cos * cj],
    ])
    return _warp_affine(img, inv)


def shear(img: np.ndarray, degrees: float) -> np.ndarray:
    """Horizontal shear about the image center."""
    h, w = img.shape[:2]
    ci = (h - 1) / 2.0
    t = math.tan(math.radians(degrees))
    inv = np.array([
        [1.0, 0.0, 0.0],
        [-t, 1.0, t * ci],
    ])
    return _warp_affine(img, inv)


def translate(img: np.ndarray, frac_i: float, frac_j: float) -> np.ndarray:
    """Shift by (frac_i * h, frac_j * w) pixels with reflect padding."""
    h, w = img.shape[:2]
    inv = np.array([
        [1.0, 0.0, -frac_i * h],
        [0.0, 1.0, -frac_j * w],
    ])
    return _warp_affine(img, inv)


def crop_resize(img: np.ndarray, top: int, left: int, size: int) -> np.ndarray:
    """Crop a size x size window and resize back to the original extent."""
    h, w = img.shape[:2]
    if not (0 <= top <= h - size and 0 <= left <= w - size):
        raise ValidationError(f"crop window ({top},{left},{size}) exceeds image {img.shape}")
    window = img[top : top + size, left : left + size]
    return bilinear_resize(window, h, w)


def augment(
    img: np.ndarray,
    policy: AugmentPolicy,
    rng: np.random.Generator,
    force: bool = False,
) -> np.ndarray:
    """Apply each enabled op independently with its probability.

    With force=True every enabled op fires (used for oversampled duplicate
    records so they never collide pixelwise with their source).
    """
    if img.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise ValidationError(f"augment expects (224, 224, 3) input, got {img.shape}")

    def fires(p: float) -> bool:
        roll = rng.random()
        return p > 0 and (force or roll < p)

    if fires(policy.p_horizontal_flip):
        img = horizontal_flip(img)
    if fires(policy.p_vertical_flip):
        img = vertical_flip(img)
    if fires(policy.p_rotate):
        img = rotate(img, rng.uniform(-policy.rotate_degrees, policy.rotate_degrees))
    if fires(policy.p_shear):
        img = shear(img, rng.uniform(-policy.shear_degrees, policy.shear_degrees))
    if fires(policy.p_crop):
        size = int(round(IMAGE_SIZE * policy.crop_fraction))
        top = int(rng.integers(0, IMAGE_SIZE - size + 1))
        left = int(rng.integers(0, IMAGE_SIZE - size + 1))
        img = crop_resize(img, top, left, size)
    if fires(policy.p_translate):
        f = policy.translate_fraction
        img = translate(img, rng.uniform(-f, f), rng.uniform(-f, f))
    return np.clip(img, -1.0, 1.0).astype(FLOAT, copy=False)


# ---------------------------------------------------------------------------
# balancing and batching


@dataclass(frozen=True)
class TrainItem:
    record: ManifestRecord
    force_augment: bool = False


def balance_classes(manifest: DatasetManifest, rng: np.random.Generator) -> list[TrainItem]:
    """Oversample minority classes (with replacement) up to the majority
    class's train count. Duplicates are flagged so the loader augments them
    unconditionally. Val/test records are untouched."""
    train = manifest.split_records("train")
    by_class: dict[str, list[ManifestRecord]] = {name: [] for name in CLASS_NAMES}
    for r in train:
        by_class[r.label].append(r)
    target = max(len(v) for v in by_class.values())
    items = [TrainItem(r, False) for r in train]
    for label in CLASS_NAMES:
        pool = by_class[label]
        shortfall = target - len(pool)
        if shortfall > 0:
            picks = rng.integers(0, len(pool), size=shortfall)
            items.extend(TrainItem(pool[int(i)], True) for i in picks)
    return items


class ImageCache:
    """Keeps resized (pre-range-mapping) float32 images keyed by path."""

    def __init__(self):
        self._store: dict[str, np.ndarray] = {}

    def resized(self, root: Path, rel: str) -> np.ndarray:
        hit = self._store.get(rel)
        if hit is None:
            raw = load_image(Path(root) / rel)
            if raw.ndim != 3 or raw.shape[2] != 3:
                raise ImageFormatError(f"{rel}: expected RGB raster, got {raw.shape}")
            hit = bilinear_resize(raw, IMAGE_SIZE, IMAGE_SIZE)
            self._store[rel] = hit
        return hit


def batches(
    manifest: DatasetManifest,
    split: str,
    batch_size: int,
    seed: int,
    epoch: int,
    items: list[TrainItem] | None = None,
    policy: AugmentPolicy | None = None,
    cache: ImageCache | None = None,
):
    """Yield (x, y) batches: x (b, 224, 224, 3) float32 in [-1, 1], y one-hot (b, 4).

    Order is a per-epoch shuffle seeded by (seed, epoch); the last partial
    batch is kept. `items` overrides the raw split records (pass the
    balanced train list); `policy`, when given, augments flagged duplicates
    unconditionally and everything else probabilistically.
    """
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    if items is None:
        items = [TrainItem(r, False) for r in manifest.split_records(split)]
    cache = cache if cache is not None else ImageCache()
    order = np.random.default_rng([seed, epoch, 0]).permutation(len(items))
    aug_rng = np.random.default_rng([seed, epoch, 1])
    for start in range(0, len(items), batch_size):
        chunk = [items[int(i)] for i in order[start : start + batch_size]]
        x = np.empty((len(chunk), IMAGE_SIZE, IMAGE_SIZE, 3), dtype=FLOAT)
        y = np.zeros((len(chunk), len(CLASS_NAMES)), dtype=FLOAT)
        for row, item in enumerate(chunk):
            img = to_unit_range(cache.resized(manifest.root, item.record.path))
            if policy is not None and policy.any_enabled:
                img = augment(img, policy, aug_rng, force=item.force_augment)
            x[row] = img
            y[row, CLASS_INDEX[item.record.label]] = 1.0
        yield x, y
