"""Representation diffusion model: an epsilon-predicting residual MLP over
D-dimensional representations, optionally conditioned on a class label."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .backbone import FcDenoiser, denoiser_param_shapes
from .diffusion import NoiseSchedule, ddim_loop, timestep_embed
from .errors import ConfigError, UsageError
from .numkernel import Embedding, Module
from .rng import derive_seed, make_rng
from .training import TrainConfig, fit

log = logging.getLogger(__name__)


@dataclass
class RdmConfig:
    rep_dim: int = 256
    num_blocks: int = 12
    hidden_dim: int = 1536
    timestep_embed_dim: int = 256
    class_embed_dim: int = 512
    num_classes: int = 0

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be >= 1")
        if self.hidden_dim < self.rep_dim:
            raise ConfigError("hidden_dim must be >= rep_dim")
        if self.timestep_embed_dim < 2 or self.timestep_embed_dim % 2:
            raise ConfigError("timestep_embed_dim must be even and >= 2")
        if self.class_embed_dim < 2:
            raise ConfigError("class_embed_dim must be >= 2")
        if self.num_classes < 0:
            raise ConfigError("num_classes must be >= 0")

    @property
    def conditional(self):
        return self.num_classes > 0

    def cond_dims(self):
        dims = {"time": self.timestep_embed_dim}
        if self.conditional:
            dims["class"] = self.class_embed_dim
        return dims


@dataclass
class SamplerConfig:
    ddim_steps: int = 250
    eta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.ddim_steps < 1:
            raise ConfigError("ddim_steps must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("eta must lie in [0, 1]")


class RdmModel(Module):
    def __init__(self, config: RdmConfig, seed=0, dtype=np.float32):
        super().__init__()
        self.config = config
        self.denoiser = FcDenoiser(
            config.rep_dim, config.hidden_dim, config.num_blocks, config.cond_dims(), dtype=dtype
        )
        self.children = {"net": self.denoiser}
        if config.conditional:
            self.class_embed = Embedding(config.num_classes, config.class_embed_dim, dtype=dtype)
            self.children["class_embed"] = self.class_embed
        self.init_params(seed)

    def _conds(self, t, labels, batch):
        cfg = self.config
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (batch,))
        conds = {"time": timestep_embed(t, cfg.timestep_embed_dim).astype(self.dtype)}
        if cfg.conditional:
            if labels is None:
                raise UsageError("class-conditional RDM needs a class label")
            labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (batch,))
            if np.any(labels < 0) or np.any(labels >= cfg.num_classes):
                raise UsageError(f"class label outside [0, {cfg.num_classes})")
            conds["class"] = self.class_embed.forward(labels)
        elif labels is not None:
            raise UsageError("unconditional RDM does not take a class label")
        return conds

    def forward(self, z_t, t, labels=None):
        z_t = np.asarray(z_t, dtype=self.dtype)
        return self.denoiser.forward(z_t, self._conds(t, labels, z_t.shape[0]))

    def backward(self, grad_out):
        gx, gconds = self.denoiser.backward(grad_out)
        if self.config.conditional:
            self.class_embed.backward(gconds["class"])
        return gx


def rdm_forward(z_t, t, model: RdmModel, class_label=None):
    return model.forward(z_t, t, class_label)


def param_count(config: RdmConfig) -> int:
    shapes = denoiser_param_shapes(
        config.rep_dim, config.hidden_dim, config.num_blocks, config.cond_dims()
    )
    total = sum(int(np.prod(s)) for s in shapes.values())
    if config.conditional:
        total += config.num_classes * config.class_embed_dim
    return total


def _noise_batch(z0, schedule, rng):
    B = z0.shape[0]
    t = rng.integers(0, schedule.T, size=B)
    eps = rng.standard_normal(z0.shape)
    a = schedule.alpha_bar[t][:, None]
    z_t = np.sqrt(a) * z0 + np.sqrt(1.0 - a) * eps
    return z_t, t, eps


def eps_loss_and_grad(eps_hat, eps):
    """Mean over items of the squared error norm, and its gradient."""
    diff = eps_hat.astype(np.float64) - eps
    loss = float((diff * diff).sum(axis=1).mean())
    return loss, (2.0 / eps.shape[0]) * diff


def rdm_loss(z0, model: RdmModel, schedule: NoiseSchedule, seed, labels=None) -> float:
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.shape[0] == 0:
        raise UsageError("empty batch")
    z_t, t, eps = _noise_batch(z0, schedule, make_rng(seed, "rdm-loss"))
    return eps_loss_and_grad(model.forward(z_t, t, labels), eps)[0]


def train_rdm(reps, config: RdmConfig, schedule: NoiseSchedule, train: TrainConfig, seed,
              labels=None, model=None):
    """Fit an RDM to rows of ``reps``. Returns (model, per-step-window loss log)."""
    reps = np.asarray(reps, dtype=np.float64)
    if reps.ndim != 2 or reps.shape[1] != config.rep_dim:
        raise ConfigError(f"representations must be [n, {config.rep_dim}]")
    if reps.shape[0] == 0:
        raise UsageError("no representations to train on")
    if config.conditional:
        if labels is None:
            raise UsageError("class-conditional RDM training needs labels")
        labels = np.asarray(labels, dtype=np.int64)
        if np.any(labels < 0) or np.any(labels >= config.num_classes):
            raise UsageError("training labels outside the configured class range")
    model = model or RdmModel(config, seed=seed)
    rng = make_rng(seed, "rdm-train")

    def step(k):
        idx = rng.integers(0, reps.shape[0], size=train.batch_size)
        z_t, t, eps = _noise_batch(reps[idx], schedule, rng)
        eps_hat = model.forward(z_t, t, None if labels is None else labels[idx])
        loss, g = eps_loss_and_grad(eps_hat, eps)
        model.backward(g.astype(model.dtype))
        return loss

    history = fit(model, step, train, name="rdm")
    return model, history


def ddim_sample(model: RdmModel, schedule: NoiseSchedule, sampler: SamplerConfig, n=1,
                class_label=None, seeds=None, z_T=None):
    """Draw ``n`` representations. Item i uses the stream ``seeds[i]`` (default:
    derived from sampler.seed and i) for its start noise and per-step noise.
    ``z_T`` overrides the start noise (η=0 then makes the result deterministic in it)."""
    if z_T is not None:
        n = len(z_T)
    if seeds is None:
        seeds = [derive_seed(sampler.seed, "rdm-sample", i) for i in range(n)]
    rngs = [make_rng(s) for s in seeds]

    def eps_fn(x, t, i):
        return model.forward(x, t, class_label)

    return ddim_loop(eps_fn, schedule, sampler.ddim_steps, sampler.eta, rngs,
                     model.config.rep_dim, x_start=z_T)
