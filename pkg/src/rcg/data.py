"""Dataset ingestion: MNIST IDX files and deterministic synthetic generators."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .rng import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SHAPE_KINDS = ("disk", "square", "cross", "ring")


@dataclass
class Dataset:
    images: np.ndarray  # [n, H, W] in [0, 1] (or [n, D] vectors for mixtures)
    labels: np.ndarray  # [n], -1 when unlabeled

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return Dataset(self.images[idx], self.labels[idx])


@dataclass
class DatasetSpec:
    kind: str = "synthetic_shapes"
    num_classes: int = 3
    items_per_class: int = 4000
    image_size: int = 16
    seed: int = 0
    heldout_fraction: float = 0.1
    images_path: str = ""
    labels_path: str = ""
    # synthetic_shapes nuisance ranges; None selects size-relative defaults
    jitter: float | None = None
    radius_range: tuple | None = None
    intensity_range: tuple = (0.6, 1.0)

    def __post_init__(self):
        if self.kind not in ("mnist_idx", "synthetic_shapes", "synthetic_mixture"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if not 0.0 <= self.heldout_fraction < 1.0:
            raise ConfigError("heldout_fraction must lie in [0, 1)")
        if self.radius_range is not None:
            self.radius_range = tuple(float(r) for r in self.radius_range)
        self.intensity_range = tuple(float(r) for r in self.intensity_range)


def _read_idx(path, magic, ndim):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    if len(data) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated IDX header")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise FormatError(f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(">" + "I" * ndim, data[4:4 + 4 * ndim])
    payload = data[4 + 4 * ndim:]
    expected = int(np.prod(dims))
    if len(payload) < expected:
        raise FormatError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    if len(payload) > expected:
        raise FormatError(f"{path}: {len(payload) - expected} trailing bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_mnist_idx(images_path, labels_path=None) -> Dataset:
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3).astype(np.float64) / 255.0
    if labels_path:
        labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1).astype(np.int64)
        if len(labels) != len(images):
            raise FormatError(f"{len(images)} images but {len(labels)} labels")
    else:
        labels = np.full(len(images), -1, dtype=np.int64)
    return Dataset(images, labels)


def write_idx(path, array, magic):
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        fh.write(array.tobytes())


def render_shape(kind, size, cy, cx, radius, intensity):
    """Rasterize one primitive on a size x size canvas (pixel-center sampling)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        mask = dy * dy + dx * dx <= radius * radius
    elif kind == "square":
        mask = (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    elif kind == "cross":
        arm = max(0.75, radius / 3.0)
        mask = ((np.abs(dy) <= arm) & (np.abs(dx) <= radius)) | (
            (np.abs(dx) <= arm) & (np.abs(dy) <= radius))
    elif kind == "ring":
        r2 = dy * dy + dx * dx
        mask = (r2 <= radius * radius) & (r2 >= (0.55 * radius) ** 2)
    else:
        raise ConfigError(f"unknown primitive {kind!r}")
    return mask.astype(np.float64) * intensity


def gen_synthetic_shapes(num_classes=3, items_per_class=1000, image_size=16, seed=0,
                         jitter=None, radius_range=None, intensity_range=(0.6, 1.0)) -> Dataset:
    """Grayscale primitives (class = primitive type) at random centre, size and
    intensity; items are interleaved by class and fully determined by ``seed``."""
    if image_size < 8:
        raise ConfigError("image_size must be >= 8")
    if not 1 <= num_classes <= len(SHAPE_KINDS):
        raise ConfigError(f"num_classes must be in [1, {len(SHAPE_KINDS)}]")
    rng = make_rng(seed, "synthetic-shapes")
    centre = (image_size - 1) / 2.0
    jitter = image_size / 8.0 if jitter is None else jitter
    lo, hi = radius_range or (image_size * 0.18, image_size * 0.32)
    n = num_classes * items_per_class
    labels = np.tile(np.arange(num_classes), items_per_class)
    cy = centre + rng.uniform(-jitter, jitter, n)
    cx = centre + rng.uniform(-jitter, jitter, n)
    radius = rng.uniform(lo, hi, n)
    intensity = rng.uniform(*intensity_range, n)
    images = np.stack([
        render_shape(SHAPE_KINDS[labels[i]], image_size, cy[i], cx[i], radius[i], intensity[i])
        for i in range(n)
    ])
    return Dataset(images, labels.astype(np.int64))


def gen_synthetic_mixture(n, num_modes=8, dim=2, radius=2.0, std=0.2, seed=0) -> Dataset:
    """Isotropic Gaussians centred on a circle in the first two coordinates."""
    rng = make_rng(seed, "synthetic-mixture")
    k = rng.integers(0, num_modes, n)
    centres = np.zeros((num_modes, dim))
    ang = 2 * np.pi * np.arange(num_modes) / num_modes
    centres[:, 0], centres[:, 1] = radius * np.cos(ang), radius * np.sin(ang)
    return Dataset(centres[k] + std * rng.standard_normal((n, dim)), k.astype(np.int64))


def load_dataset(spec: DatasetSpec) -> Dataset:
    if spec.kind == "mnist_idx":
        return load_mnist_idx(spec.images_path, spec.labels_path or None)
    if spec.kind == "synthetic_shapes":
        return gen_synthetic_shapes(spec.num_classes, spec.items_per_class, spec.image_size,
                                    spec.seed, spec.jitter, spec.radius_range, spec.intensity_range)
    return gen_synthetic_mixture(spec.num_classes * spec.items_per_class,
                                 num_modes=spec.num_classes, seed=spec.seed)


def split(dataset: Dataset, heldout_fraction, seed=0):
    """Deterministic (train, heldout) split."""
    perm = make_rng(seed, "split").permutation(len(dataset))
    n_held = int(round(len(dataset) * heldout_fraction))
    return dataset.subset(np.sort(perm[n_held:])), dataset.subset(np.sort(perm[:n_held]))
