"""Synthetic datasets, IDX ingestion and dataset snapshots.

Snapshot directory layout::

    manifest.json   {"format": "cmap-lab-dataset", "version": 1, "kind": ...,
                     "sample_shape": [...], "count": n, "value_range": [lo, hi] | null,
                     "num_classes": C, "extra": {...}}
    samples.f64     n * prod(sample_shape) little-endian float64, row-major
    labels.i64      n little-endian int64
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import NumericsError, RngStream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    kind: str  # "points" | "image"
    samples: np.ndarray  # (n, *sample_shape)
    labels: np.ndarray  # (n,) int64
    value_range: tuple[float, float] | None = None
    num_classes: int | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.kind not in ("points", "image"):
            raise NumericsError(f"unknown dataset kind {self.kind!r}")
        if self.labels.shape != (self.samples.shape[0],):
            raise NumericsError("labels length must equal batch size")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if self.labels.size else 0
        if self.value_range is not None and self.samples.size:
            lo, hi = self.value_range
            if self.samples.min() < lo or self.samples.max() > hi:
                raise NumericsError("image values outside value_range")

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.samples.shape[1:])

    @property
    def dim(self) -> int:
        return int(np.prod(self.sample_shape))

    def __len__(self) -> int:
        return self.samples.shape[0]

    def flat(self) -> np.ndarray:
        return self.samples.reshape(len(self), -1)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.kind, self.samples[idx], self.labels[idx], self.value_range,
                       self.num_classes, dict(self.extra))


def train_test_split(ds: Dataset, n_train: int) -> tuple[Dataset, Dataset]:
    """First ``n_train`` samples for training, the rest for testing (generators shuffle already)."""
    if not 0 < n_train < len(ds):
        raise NumericsError("n_train must leave both splits non-empty")
    idx = np.arange(len(ds))
    return ds.subset(idx[:n_train]), ds.subset(idx[n_train:])


@dataclass
class SyntheticSpec:
    family: str = "shape-images"  # isotropic-gaussian | gaussian-mixture | shape-images
    dim: int = 2
    image_size: int = 16
    num_classes: int = 3
    means: Sequence[Sequence[float]] | None = None
    sigma_x: float | Sequence[float] = 1.0
    count: int = 5000
    seed: int = 0
    noise_amplitude: float = 0.01
    contrast: tuple[float, float] = (0.06, 0.15)

    def validate(self) -> None:
        if self.family not in ("isotropic-gaussian", "gaussian-mixture", "shape-images"):
            raise NumericsError(f"unknown family {self.family!r}")
        if self.count < 1:
            raise NumericsError("count must be positive")
        if self.family == "shape-images":
            if self.image_size < 8:
                raise NumericsError("image size must be at least 8x8")
            if not 2 <= self.num_classes <= 4:
                raise NumericsError("shape-images supports 2-4 classes")
            return
        n_comp = 1 if self.family == "isotropic-gaussian" else self.num_classes
        means = self.means if self.means is not None else [[0.0] * self.dim] * n_comp
        if len(means) != n_comp or any(len(m) != self.dim for m in means):
            raise NumericsError("one mean of length dim per component is required")
        sig = np.atleast_1d(np.asarray(self.sigma_x, dtype=np.float64))
        if sig.size not in (1, n_comp):
            raise NumericsError("sigma_x must be scalar or one per component")
        if np.any(sig <= 0):
            raise NumericsError("sigma_x must be positive")


def gen_gaussian(spec: SyntheticSpec) -> Dataset:
    spec.validate()
    if spec.family == "shape-images":
        raise NumericsError("gen_gaussian needs a gaussian family")
    n_comp = 1 if spec.family == "isotropic-gaussian" else spec.num_classes
    means = np.asarray(spec.means if spec.means is not None else [[0.0] * spec.dim] * n_comp,
                       dtype=np.float64)
    sig = np.broadcast_to(np.atleast_1d(np.asarray(spec.sigma_x, dtype=np.float64)), (n_comp,))
    root = RngStream(spec.seed, 0x6A55)
    labels = root.child(1).generator().integers(0, n_comp, spec.count)
    z = root.child(2).generator().standard_normal((spec.count, spec.dim))
    samples = means[labels] + sig[labels, None] * z
    return Dataset("points", samples, labels, None, n_comp,
                   {"means": means.tolist(), "sigma_x": sig.tolist()})


def _shape_image(cls: int, size: int, gen: np.random.Generator,
                 contrast: tuple[float, float]) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    if cls == 0:  # filled disc
        cy, cx = gen.uniform(0.35 * size, 0.65 * size, 2)
        r = gen.uniform(0.22 * size, 0.34 * size)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif cls == 1:  # horizontal bars
        period = gen.integers(4, 7)
        phase = gen.integers(0, period)
        mask = ((yy.astype(int) + phase) % period) < period // 2
    elif cls == 2:  # checkerboard
        cell = gen.integers(3, 5)
        oy, ox = gen.integers(0, cell, 2)
        mask = (((yy.astype(int) + oy) // cell + (xx.astype(int) + ox) // cell) % 2) == 0
    else:  # vertical bars
        period = gen.integers(4, 7)
        phase = gen.integers(0, period)
        mask = ((xx.astype(int) + phase) % period) < period // 2
    bg = gen.uniform(0.25, 0.55)
    fg = bg + gen.uniform(*contrast)
    return np.where(mask, fg, bg)


def gen_shape_images(spec: SyntheticSpec) -> Dataset:
    """Procedural grayscale images in [0, 1]: disc / horizontal bars / checker / vertical bars."""
    spec.validate()
    if spec.family != "shape-images":
        raise NumericsError("gen_shape_images needs family 'shape-images'")
    root = RngStream(spec.seed, 0x5A4E)
    labels = root.child(1).generator().integers(0, spec.num_classes, spec.count)
    images = np.empty((spec.count, spec.image_size, spec.image_size))
    for i, c in enumerate(labels):
        gen = root.child(2, i).generator()
        img = _shape_image(int(c), spec.image_size, gen, tuple(spec.contrast))
        if spec.noise_amplitude > 0:
            img = img + spec.noise_amplitude * gen.uniform(-1.0, 1.0, img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset("image", images, labels, (0.0, 1.0), spec.num_classes)


def generate(spec: SyntheticSpec) -> Dataset:
    return gen_shape_images(spec) if spec.family == "shape-images" else gen_gaussian(spec)


# ---------------------------------------------------------------------------
# IDX


class IdxError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


def _read_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    if len(raw) < 4:
        raise IdxTruncatedError("file shorter than the magic number", len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IdxTruncatedError("truncated dimension header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    n_bytes = int(np.prod(dims)) if dims else 0
    if len(raw) < header_end + n_bytes:
        raise IdxTruncatedError(
            f"payload needs {n_bytes} bytes, found {len(raw) - header_end}", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=n_bytes, offset=header_end).reshape(dims)


def load_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    images = _read_idx(Path(images_path).read_bytes(), IDX_IMAGES_MAGIC)
    labels = _read_idx(Path(labels_path).read_bytes(), IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        # the count field sits right after the labels magic
        raise IdxCountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels", 4)
    return Dataset("image", images.astype(np.float64) / 255.0, labels.astype(np.int64), (0.0, 1.0))


def save_idx(ds: Dataset, images_path: str | Path, labels_path: str | Path) -> None:
    if ds.kind != "image" or len(ds.sample_shape) != 2:
        raise NumericsError("IDX export needs 2-D images")
    pix = np.rint(np.clip(ds.samples, 0.0, 1.0) * 255.0).astype(np.uint8)
    n, h, w = pix.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + pix.tobytes())
    Path(labels_path).write_bytes(
        struct.pack(">II", IDX_LABELS_MAGIC, n) + ds.labels.astype(np.uint8).tobytes())


def quantize_255(ds: Dataset) -> Dataset:
    """Snap image values to the 8-bit grid IDX can represent."""
    return Dataset(ds.kind, np.rint(ds.samples * 255.0) / 255.0, ds.labels, ds.value_range,
                   ds.num_classes, dict(ds.extra))


# ---------------------------------------------------------------------------
# snapshots


def save_dataset(ds: Dataset, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "cmap-lab-dataset",
        "version": 1,
        "kind": ds.kind,
        "sample_shape": list(ds.sample_shape),
        "count": len(ds),
        "value_range": list(ds.value_range) if ds.value_range is not None else None,
        "num_classes": ds.num_classes,
        "extra": ds.extra,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (d / "samples.f64").write_bytes(ds.samples.astype("<f8").tobytes())
    (d / "labels.i64").write_bytes(ds.labels.astype("<i8").tobytes())


def load_dataset(directory: str | Path) -> Dataset:
    d = Path(directory)
    m = json.loads((d / "manifest.json").read_text())
    if m.get("format") != "cmap-lab-dataset":
        raise NumericsError(f"{d} is not a dataset snapshot")
    shape = (m["count"], *m["sample_shape"])
    samples = np.frombuffer((d / "samples.f64").read_bytes(), dtype="<f8").reshape(shape)
    labels = np.frombuffer((d / "labels.i64").read_bytes(), dtype="<i8")
    vr = tuple(m["value_range"]) if m["value_range"] is not None else None
    return Dataset(m["kind"], samples.astype(np.float64), labels.astype(np.int64), vr,
                   m["num_classes"], m.get("extra", {}))
