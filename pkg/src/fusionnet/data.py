"""Dataset ingestion, preprocessing, augmentation, synthetic data and splits.

Images are channels-last float64 arrays scaled to [-1, 1].
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

DEFAULT_CLASSES = ("covid", "pneumonia", "normal")

# 12,157 / 3,219 / 5,896 of 21,272 images; rounds to (0.5715, 0.1513, 0.2772).
DEFAULT_RATIOS = (12157 / 21272, 3219 / 21272, 5896 / 21272)


class DataError(ValueError):
    pass


@dataclass
class DatasetManifest:
    root: str
    classes: tuple[str, ...]
    samples: list[tuple[str, int]] = field(default_factory=list)

    def __post_init__(self):
        counts = self.class_counts()
        empty = [c for c, n in zip(self.classes, counts) if n == 0]
        if empty:
            raise DataError(f"classes without samples: {empty}")
        if any(not 0 <= label < len(self.classes) for _, label in self.samples):
            raise DataError("sample label outside class range")

    def class_counts(self) -> list[int]:
        counts = [0] * len(self.classes)
        for _, label in self.samples:
            if 0 <= label < len(counts):
                counts[label] += 1
        return counts

    @property
    def labels(self) -> np.ndarray:
        return np.array([label for _, label in self.samples], dtype=np.int64)

    def __len__(self):
        return len(self.samples)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "label"])
            for p, label in self.samples:
                w.writerow([p, label])

    def subset(self, indices: Sequence[int]) -> "DatasetManifest":
        return DatasetManifest(self.root, self.classes, [self.samples[i] for i in indices])


def scan_directory(root, classes: Sequence[str] | None = None) -> DatasetManifest:
    """Manifest for a ``root/<class-name>/*.png`` layout, sorted by path."""
    root = Path(root)
    if classes is None:
        present = {p.name for p in root.iterdir() if p.is_dir()}
        classes = [c for c in DEFAULT_CLASSES if c in present] if set(DEFAULT_CLASSES) <= present \
            else sorted(present)
    samples = []
    for label, cls in enumerate(classes):
        for p in sorted((root / cls).glob("*.png")):
            samples.append((str(p.relative_to(root)), label))
    return DatasetManifest(str(root), tuple(classes), samples)


# --------------------------------------------------------------------------
# preprocessing


def bilinear_resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize (H, W, C) with pixel-centre sampling (align-corners off).

    Output pixel ``i`` samples source coordinate ``(i + 0.5) * H / height - 0.5``,
    clamped to the valid range.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h, height)
    x0, x1, fx = axis(w, width)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def to_unit_range(pixels: np.ndarray) -> np.ndarray:
    """Map 8-bit intensities onto [-1, 1] via x / 127.5 - 1."""
    return np.asarray(pixels, dtype=np.float64) / 127.5 - 1.0


def load_and_preprocess(path, target: tuple[int, int, int]) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode not in ("L", "RGB"):
                raise DataError(f"{path}: unsupported pixel format {mode!r} (need 8-bit L or RGB)")
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, Image.UnidentifiedImageError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return preprocess_array(arr, target)


def preprocess_array(arr: np.ndarray, target: tuple[int, int, int]) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = target
    if arr.shape[-1] == 3 and c == 1:
        arr = arr.astype(np.float64).mean(axis=-1, keepdims=True)
    elif arr.shape[-1] == 1 and c == 3:
        arr = np.repeat(arr, 3, axis=-1)
    elif arr.shape[-1] != c:
        raise DataError(f"cannot map {arr.shape[-1]} channels to {c}")
    out = to_unit_range(bilinear_resize(arr.astype(np.float64), h, w))
    return np.clip(out, -1.0, 1.0)


def load_images(manifest: DatasetManifest, target) -> np.ndarray:
    return np.stack([load_and_preprocess(os.path.join(manifest.root, p), target) for p, _ in manifest.samples])


# --------------------------------------------------------------------------
# augmentation


def affine_warp(img: np.ndarray, shear: float, zoom: float) -> np.ndarray:
    """Horizontal shear plus isotropic zoom about the image centre.

    ``zoom > 1`` magnifies.  Bilinear resampling with edge replication.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    # output (r, c) samples input centre + A @ ((r, c) - centre)
    a = np.array([[1.0, 0.0], [shear, 1.0]]) / zoom
    offset = centre - a @ centre
    out = np.empty_like(img)
    for ch in range(img.shape[2]):
        out[:, :, ch] = ndimage.affine_transform(img[:, :, ch], a, offset=offset, order=1, mode="nearest")
    return out


def augment(img: np.ndarray, seed: int, shear_range: float = 0.1, zoom_range: float = 0.1) -> np.ndarray:
    rng = np.random.default_rng(seed)
    shear = rng.uniform(-shear_range, shear_range)
    zoom = rng.uniform(1.0 - zoom_range, 1.0 + zoom_range)
    return affine_warp(img, shear, zoom)


# --------------------------------------------------------------------------
# synthetic data

QUADRANTS = ("upper-left", "upper-right", "lower-left", "lower-right")


@dataclass
class SyntheticSet:
    images: np.ndarray  # (N, size, size, 1)
    labels: np.ndarray
    quadrants: np.ndarray  # evidence quadrant index per sample, -1 when none
    manifest: DatasetManifest


def _blob(size, quadrant, rng, jitter):
    half = size // 2
    r0 = (half if quadrant >= 2 else 0) + half / 2
    c0 = (half if quadrant % 2 else 0) + half / 2
    if jitter:
        r0 += rng.uniform(-2, 2)
        c0 += rng.uniform(-2, 2)
    rr, cc = np.mgrid[0:size, 0:size]
    return np.exp(-((rr - r0) ** 2 + (cc - c0) ** 2) / (2 * (size / 7) ** 2))


def _bands(size, quadrant, rng):
    rr = np.arange(size)[:, None] * np.ones((1, size))
    phase = rng.uniform(0, 2 * np.pi)
    bands = 0.6 * np.sign(np.sin(2 * np.pi * rr / 6 + phase))
    if quadrant < 0:
        return bands
    half = size // 2
    mask = np.zeros((size, size))
    r = half if quadrant >= 2 else 0
    c = half if quadrant % 2 else 0
    mask[r:r + half, c:c + half] = 1.0
    return bands * mask


def synthesize(n_per_class: int, classes: int = 3, size: int = 32, seed: int = 0,
               layout: str = "fixed", noise: float = 0.1) -> SyntheticSet:
    """Separable stand-in for the X-ray corpus.

    class 0: bright blob (lower-left in the ``fixed`` layout), class 1:
    horizontal bands, class 2: noise only.  With ``layout="quadrant"`` the
    blob or band patch lands in a random quadrant, recorded per sample.
    Extra classes beyond 3 reuse the noise-only pattern at growing amplitude.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if layout not in ("fixed", "quadrant"):
        raise ValueError(f"unknown layout {layout!r}")
    rng = np.random.default_rng(seed)
    images, labels, quads = [], [], []
    for label in range(classes):
        for _ in range(n_per_class):
            q = -1
            if label == 0:
                q = 2 if layout == "fixed" else int(rng.integers(4))
                base = 0.95 * _blob(size, q, rng, jitter=True)
            elif label == 1:
                q = -1 if layout == "fixed" else int(rng.integers(4))
                base = _bands(size, q, rng)
            else:
                base = np.zeros((size, size)) + 0.05 * (label - 2)
            img = base + noise * rng.standard_normal((size, size))
            images.append(np.clip(img, -1.0, 1.0)[:, :, None])
            labels.append(label)
            quads.append(q)
    names = tuple(DEFAULT_CLASSES[:classes]) if classes <= 3 else tuple(f"class{i}" for i in range(classes))
    order = rng.permutation(len(labels))
    images = np.stack(images)[order]
    labels = np.array(labels, dtype=np.int64)[order]
    quads = np.array(quads, dtype=np.int64)[order]
    manifest = DatasetManifest("<synthetic>", names,
                               [(f"synthetic/{i:05d}.png", int(lbl)) for i, lbl in enumerate(labels)])
    return SyntheticSet(images, labels, quads, manifest)


def write_png_dataset(ds: SyntheticSet, root) -> DatasetManifest:
    """Write ``root/<class>/<index>.png`` (8-bit grayscale) plus manifest.csv."""
    root = Path(root)
    samples = []
    for i, (img, label) in enumerate(zip(ds.images, ds.labels)):
        cls = ds.manifest.classes[label]
        (root / cls).mkdir(parents=True, exist_ok=True)
        rel = f"{cls}/{i:05d}.png"
        pixels = np.clip(np.rint((img[:, :, 0] + 1.0) * 127.5), 0, 255).astype(np.uint8)
        Image.fromarray(pixels, mode="L").save(root / rel)
        samples.append((rel, int(label)))
    manifest = DatasetManifest(str(root), ds.manifest.classes, samples)
    manifest.to_csv(root / "manifest.csv")
    return manifest


# --------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = DEFAULT_RATIOS
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios):
            raise ValueError(f"ratios must be three positive numbers, got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"ratios must sum to 1, got {sum(self.ratios)!r}")


def _round_half_up(x: float) -> int:
    return int(math.floor(Fraction(x) + Fraction(1, 2)))


def split_sizes(n: int, ratios) -> tuple[int, int, int]:
    """Validation and test sizes are rounded; train takes the remainder."""
    val = _round_half_up(n * ratios[1])
    test = _round_half_up(n * ratios[2])
    return n - val - test, val, test


def split(manifest: DatasetManifest, spec: SplitSpec = SplitSpec()):
    """Stratified, seeded split into (train, val, test) index arrays."""
    rng = np.random.default_rng(spec.seed)
    labels = manifest.labels
    parts = ([], [], [])
    for label in range(len(manifest.classes)):
        idx = np.flatnonzero(labels == label)
        if len(idx) < 3:
            raise DataError(f"class {manifest.classes[label]!r} has {len(idx)} samples; need at least 3")
        idx = idx[rng.permutation(len(idx))]
        n_train, n_val, _ = split_sizes(len(idx), spec.ratios)
        parts[0].extend(idx[:n_train])
        parts[1].extend(idx[n_train:n_train + n_val])
        parts[2].extend(idx[n_train + n_val:])
    return tuple(np.sort(np.array(p, dtype=np.int64)) for p in parts)
