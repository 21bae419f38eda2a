"""Contrastive image encoder (MLP backbone + projection head trained with
NT-Xent on two augmented views), per-vector representation normalization and
the uniformity diagnostic."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateRepresentationError, UsageError
from .numkernel import Linear, Module, Sequential, SiLU
from .rng import make_rng
from .training import TrainConfig, fit

log = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    image_shape: tuple = (16, 16)
    hidden_dims: tuple = (512, 512)
    projection_dim: int = 256
    temperature: float = 0.2
    noise_sigma: float = 0.1
    shift_radius: int = 2

    def __post_init__(self):
        self.image_shape = tuple(int(x) for x in self.image_shape)
        self.hidden_dims = tuple(int(x) for x in self.hidden_dims)
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.projection_dim < 2:
            raise ConfigError("projection_dim must be >= 2")
        if self.noise_sigma < 0 or self.shift_radius < 0:
            raise ConfigError("augmentation parameters must be non-negative")

    @property
    def input_dim(self):
        return int(np.prod(self.image_shape))


@dataclass
class EncoderTrainConfig:
    epochs: int = 10
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999


class Encoder(Module):
    def __init__(self, config: EncoderConfig, seed=0, zero_head=False, dtype=np.float32):
        super().__init__()
        self.config = config
        layers, d = [], config.input_dim
        for h in config.hidden_dims:
            layers += [Linear(d, h, dtype=dtype), SiLU()]
            d = h
        self.backbone = Sequential(*layers)
        self.head = Linear(d, config.projection_dim, zero_init=zero_head, dtype=dtype)
        self.children = {"backbone": self.backbone, "head": self.head}
        self.trained = False
        self.init_params(seed)

    def forward(self, x):
        return self.head.forward(self.backbone.forward(x))

    def backward(self, grad_out):
        return self.backbone.backward(self.head.backward(grad_out))


def _flatten(images, config):
    images = np.asarray(images)
    if images.ndim == len(config.image_shape):
        images = images[None]
    if tuple(images.shape[1:]) != config.image_shape and images.shape[1:] != (config.input_dim,):
        raise ConfigError(
            f"encoder expects images of shape {config.image_shape}, got {tuple(images.shape[1:])}"
        )
    return images.reshape(images.shape[0], -1)


def encode(images, encoder: Encoder, batch_size=1024):
    """Unnormalized projection-head outputs, [n, D]."""
    flat = _flatten(images, encoder.config).astype(encoder.dtype)
    out = [encoder.forward(flat[i:i + batch_size]) for i in range(0, len(flat), batch_size)]
    if not out:
        return np.zeros((0, encoder.config.projection_dim), encoder.dtype)
    return np.concatenate(out)


def normalize_rep(v):
    """(v - mean) / std per vector, population std. Accepts [D] or [n, D]."""
    v = np.asarray(v, dtype=np.float64)
    rows = v[None] if v.ndim == 1 else v
    mu = rows.mean(axis=1, keepdims=True)
    var = ((rows - mu) ** 2).mean(axis=1, keepdims=True)
    bad = np.flatnonzero(var[:, 0] <= 1e-12)
    if bad.size:
        raise DegenerateRepresentationError(
            "representation has (near-)zero variance", index=None if v.ndim == 1 else int(bad[0])
        )
    out = (rows - mu) / np.sqrt(var)
    return out[0] if v.ndim == 1 else out


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def _shift(img, dy, dx):
    out = np.zeros_like(img)
    H, W = img.shape
    ys, yd = (slice(0, H - dy), slice(dy, H)) if dy >= 0 else (slice(-dy, H), slice(0, H + dy))
    xs, xd = (slice(0, W - dx), slice(dx, W)) if dx >= 0 else (slice(-dx, W), slice(0, W + dx))
    out[yd, xd] = img[ys, xs]
    return out


def augment(image, seed_or_rng, noise_sigma=0.1, shift_radius=2):
    """Random integer shift (zero fill) within ``shift_radius`` then additive
    Gaussian noise, clamped to [0, 1]."""
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else make_rng(seed_or_rng)
    img = np.asarray(image, dtype=np.float64)
    if shift_radius > 0:
        dy, dx = rng.integers(-shift_radius, shift_radius + 1, size=2)
        img = _shift(img, int(dy), int(dx))
    if noise_sigma > 0:
        img = np.clip(img + noise_sigma * rng.standard_normal(img.shape), 0.0, 1.0)
    return img


def augment_batch(images, rng, noise_sigma, shift_radius):
    return np.stack([augment(im, rng, noise_sigma, shift_radius) for im in images])


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


def _l2_normalize(x):
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return x / np.maximum(norm, 1e-12), norm


def info_nce_loss_and_grad(views_a, views_b, temperature):
    """NT-Xent over 2N anchors. Returns (loss, grad_a, grad_b)."""
    a = np.asarray(views_a, dtype=np.float64)
    b = np.asarray(views_b, dtype=np.float64)
    N = a.shape[0]
    if N == 0:
        raise UsageError("info_nce_loss needs at least one pair")
    if a.shape != b.shape:
        raise ConfigError("view batches must have equal shape")
    z_raw = np.concatenate([a, b])
    z, norm = _l2_normalize(z_raw)
    logits = (z @ z.T) / temperature
    np.fill_diagonal(logits, -np.inf)
    pos = np.concatenate([np.arange(N, 2 * N), np.arange(N)])
    m = logits.max(axis=1, keepdims=True)
    p = np.exp(logits - m)
    lse = m[:, 0] + np.log(p.sum(axis=1))
    loss = float((lse - logits[np.arange(2 * N), pos]).mean())

    G = p / p.sum(axis=1, keepdims=True)
    G[np.arange(2 * N), pos] -= 1.0
    G /= 2 * N
    gz = (G + G.T) @ z / temperature
    g_raw = (gz - z * (z * gz).sum(axis=1, keepdims=True)) / np.maximum(norm, 1e-12)
    return loss, g_raw[:N], g_raw[N:]


def info_nce_loss(views_a, views_b, temperature=0.2):
    return info_nce_loss_and_grad(views_a, views_b, temperature)[0]


def uniformity(reps, t=2.0):
    """log mean_{i<j} exp(-t ||x_i - x_j||^2) over L2-normalized vectors."""
    x = np.asarray(reps, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise UsageError("uniformity needs at least two vectors")
    x, _ = _l2_normalize(x)
    sq = (x * x).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)
    iu = np.triu_indices(x.shape[0], k=1)
    vals = -t * d2[iu]
    m = vals.max()
    return float(m + np.log(np.exp(vals - m).mean()))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train_encoder(images, config: EncoderConfig, train: EncoderTrainConfig, seed):
    """Returns (encoder, per-epoch InfoNCE log)."""
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    if n == 0:
        raise UsageError("empty dataset")
    _flatten(images[:1], config)
    encoder = Encoder(config, seed=seed)
    rng = make_rng(seed, "encoder-train")
    steps_per_epoch = max(1, math.ceil(n / train.batch_size))
    order = []

    def step(k):
        nonlocal order
        j = k % steps_per_epoch
        if j == 0:
            order = rng.permutation(n)
        idx = order[j * train.batch_size:(j + 1) * train.batch_size]
        batch = images[idx]
        va = augment_batch(batch, rng, config.noise_sigma, config.shift_radius)
        vb = augment_batch(batch, rng, config.noise_sigma, config.shift_radius)
        x = np.concatenate([va, vb]).reshape(2 * len(idx), -1).astype(encoder.dtype)
        z = encoder.forward(x)
        loss, ga, gb = info_nce_loss_and_grad(z[: len(idx)], z[len(idx):], config.temperature)
        encoder.backward(np.concatenate([ga, gb]).astype(encoder.dtype))
        return loss

    cfg = TrainConfig(
        steps=train.epochs * steps_per_epoch, batch_size=train.batch_size, lr=train.lr,
        weight_decay=train.weight_decay, beta1=train.beta1, beta2=train.beta2,
        log_every=steps_per_epoch,
    )
    history = fit(encoder, step, cfg, name="encoder")
    for epoch, rec in enumerate(history):
        rec["epoch"] = epoch + 1
    encoder.trained = True
    return encoder, history
