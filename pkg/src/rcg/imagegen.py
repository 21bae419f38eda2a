"""Representation-conditioned pixel diffusion with representation dropout and
classifier-free guidance.

Images travel as [n, H, W] arrays in [0, 1]; the denoiser sees them flattened
and mapped to [-1, 1].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .backbone import FcDenoiser, denoiser_param_shapes
from .diffusion import NoiseSchedule, ddim_loop, timestep_embed
from .errors import ConfigError, UsageError
from .numkernel import Module
from .rdm import SamplerConfig, _noise_batch, eps_loss_and_grad
from .rng import make_rng
from .training import TrainConfig, fit

log = logging.getLogger(__name__)


@dataclass
class GenConfig:
    image_shape: tuple = (16, 16)
    rep_dim: int = 256
    hidden_dim: int = 512
    num_blocks: int = 6
    timestep_embed_dim: int = 256
    rep_drop_rate: float = 0.1
    conditional: bool = True

    def __post_init__(self):
        self.image_shape = tuple(int(x) for x in self.image_shape)
        if not 0.0 <= self.rep_drop_rate <= 1.0:
            raise ConfigError("rep_drop_rate must lie in [0, 1]")
        if self.num_blocks < 1 or self.hidden_dim < 2:
            raise ConfigError("num_blocks >= 1 and hidden_dim >= 2 required")
        if self.timestep_embed_dim < 2 or self.timestep_embed_dim % 2:
            raise ConfigError("timestep_embed_dim must be even and >= 2")
        if self.conditional and self.rep_dim < 2:
            raise ConfigError("rep_dim must be >= 2")

    @property
    def data_dim(self):
        return int(np.prod(self.image_shape))

    def cond_dims(self):
        dims = {"time": self.timestep_embed_dim}
        if self.conditional:
            dims["rep"] = self.rep_dim
        return dims


@dataclass
class GuidanceConfig:
    tau: float = 0.0
    schedule: str = "linear"

    def __post_init__(self):
        if self.tau < 0:
            raise ConfigError("guidance scale must be non-negative")
        if self.schedule not in ("linear", "constant"):
            raise ConfigError(f"unknown guidance schedule {self.schedule!r}")


class _NullEmbedding(Module):
    def __init__(self, dim, dtype):
        super().__init__()
        self.params["vector"] = np.zeros((dim,), dtype)

    def _init_param(self, name, rng):
        p = self.params[name]
        p[...] = rng.standard_normal(p.shape)


class GenModel(Module):
    def __init__(self, config: GenConfig, seed=0, dtype=np.float32):
        super().__init__()
        self.config = config
        self.denoiser = FcDenoiser(
            config.data_dim, config.hidden_dim, config.num_blocks, config.cond_dims(), dtype=dtype
        )
        self.children = {"net": self.denoiser}
        if config.conditional:
            self.null = _NullEmbedding(config.rep_dim, dtype)
            self.children["null"] = self.null
        self.init_params(seed)
        self._drop = None
        self.rep_grad = None

    def condition_input(self, reps, drop, batch):
        """Rows of ``reps`` with dropped rows (or all rows, when reps is None)
        replaced by the learned null vector."""
        D = self.config.rep_dim
        null = self.null.params["vector"]
        if reps is None:
            return np.broadcast_to(null, (batch, D)).copy(), np.ones(batch, bool)
        reps = np.asarray(reps, dtype=self.dtype)
        if reps.ndim == 1:
            reps = np.broadcast_to(reps, (batch, reps.shape[0]))
        if reps.shape != (batch, D):
            raise ConfigError(f"representations must be [{batch}, {D}], got {tuple(reps.shape)}")
        drop = np.zeros(batch, bool) if drop is None else np.asarray(drop, bool)
        return np.where(drop[:, None], null, reps), drop

    def forward(self, x_t, t, reps=None, drop=None):
        x_t = np.asarray(x_t, dtype=self.dtype)
        B = x_t.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
        conds = {"time": timestep_embed(t, self.config.timestep_embed_dim).astype(self.dtype)}
        if self.config.conditional:
            conds["rep"], self._drop = self.condition_input(reps, drop, B)
        elif reps is not None:
            raise UsageError("unconditional generator does not take representations")
        return self.denoiser.forward(x_t, conds)

    def backward(self, grad_out):
        gx, gconds = self.denoiser.backward(grad_out)
        if self.config.conditional:
            g_rep = gconds["rep"]
            self.null.grads["vector"] = g_rep[self._drop].sum(axis=0).astype(self.dtype)
            self.rep_grad = np.where(self._drop[:, None], 0.0, g_rep)
        return gx


def gen_forward(x_t, t, rep_or_null, model: GenModel):
    """Noise prediction; ``rep_or_null=None`` selects the learned null embedding."""
    return model.forward(x_t, t, rep_or_null)


def gen_param_count(config: GenConfig) -> int:
    shapes = denoiser_param_shapes(
        config.data_dim, config.hidden_dim, config.num_blocks, config.cond_dims()
    )
    total = sum(int(np.prod(s)) for s in shapes.values())
    return total + (config.rep_dim if config.conditional else 0)


def to_model_space(images):
    images = np.asarray(images, dtype=np.float64)
    return (images.reshape(images.shape[0], -1) * 2.0 - 1.0)


def train_generator(images, reps, config: GenConfig, schedule: NoiseSchedule,
                    train: TrainConfig, seed):
    """Returns (model, loss log). Each item is conditioned on its own
    representation, swapped for the null vector with probability rep_drop_rate."""
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    if n == 0:
        raise UsageError("empty dataset")
    if tuple(images.shape[1:]) != config.image_shape:
        raise ConfigError(f"images must be {config.image_shape}, got {tuple(images.shape[1:])}")
    if config.conditional:
        reps = np.asarray(reps, dtype=np.float64)
        if reps.ndim != 2 or reps.shape[0] != n:
            raise UsageError(f"representation store has {len(reps)} rows for {n} images")
        if reps.shape[1] != config.rep_dim:
            raise ConfigError(f"representations have dim {reps.shape[1]}, expected {config.rep_dim}")
    x0_all = to_model_space(images)
    model = GenModel(config, seed=seed)
    rng = make_rng(seed, "gen-train")

    def step(k):
        idx = rng.integers(0, n, size=train.batch_size)
        x_t, t, eps = _noise_batch(x0_all[idx], schedule, rng)
        drop = rng.random(train.batch_size) < config.rep_drop_rate
        cond = reps[idx] if config.conditional else None
        eps_hat = model.forward(x_t, t, cond, drop if config.conditional else None)
        loss, g = eps_loss_and_grad(eps_hat, eps)
        model.backward(g.astype(model.dtype))
        return loss

    history = fit(model, step, train, name="generator")
    return model, history


def guided_prediction(pred_c, pred_u, tau):
    pred_c = np.asarray(pred_c)
    pred_u = np.asarray(pred_u)
    if pred_c.shape != pred_u.shape:
        raise ConfigError("guided predictions must have equal shapes")
    return pred_c + tau * (pred_c - pred_u)


def guidance_schedule(tau_max, i, total_steps, kind="linear"):
    if not 0 <= i < total_steps:
        raise UsageError(f"step index {i} outside [0, {total_steps})")
    if kind == "constant":
        return float(tau_max)
    if kind != "linear":
        raise ConfigError(f"unknown guidance schedule {kind!r}")
    if total_steps < 2:
        raise ConfigError("linear guidance schedule needs at least 2 sampling steps")
    return tau_max * i / (total_steps - 1)


def sample_images(model: GenModel, reps, schedule: NoiseSchedule, sampler: SamplerConfig,
                  guidance: GuidanceConfig | None, seeds, clip_x0=1.0):
    """One image per seed, [n, H, W] in [0, 1]. ``reps`` is [n, D] (normalized)
    or None for null-conditioned sampling. Guidance with tau_i = 0 skips the
    null-conditioned pass, so it reproduces the unguided path exactly."""
    cfg = model.config
    n = len(seeds)
    if reps is not None:
        reps = np.asarray(reps, dtype=np.float64)
        if reps.ndim == 1:
            reps = np.broadcast_to(reps, (n, reps.shape[0]))
        if reps.shape[0] != n:
            raise UsageError(f"{reps.shape[0]} representations for {n} seeds")
    rngs = [make_rng(s) for s in seeds]
    S = sampler.ddim_steps

    def eps_fn(x, t, i):
        pred_c = model.forward(x, t, reps)
        if guidance is None or reps is None or not cfg.conditional:
            return pred_c
        tau_i = guidance_schedule(guidance.tau, i, S, guidance.schedule) if guidance.tau > 0 else 0.0
        if tau_i == 0.0:
            return pred_c
        pred_u = model.forward(x, t, None)
        return guided_prediction(pred_c, pred_u, tau_i)

    x = ddim_loop(eps_fn, schedule, S, sampler.eta, rngs, cfg.data_dim, clip_x0=clip_x0)
    x = (np.clip(x, -1.0, 1.0) + 1.0) / 2.0
    return x.reshape((n,) + cfg.image_shape)


def sample_image(model: GenModel, rep, schedule: NoiseSchedule, sampler: SamplerConfig,
                 guidance: GuidanceConfig | None, seed):
    reps = None if rep is None else np.asarray(rep)[None]
    return sample_images(model, reps, schedule, sampler, guidance, [seed])[0]
