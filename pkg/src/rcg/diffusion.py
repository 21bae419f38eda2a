"""Noise schedule, forward noising, sinusoidal timestep embedding and the DDIM
reverse loop. Shared by the representation and the image denoisers.

Timesteps are 0-based indices into the schedule arrays: index ``i`` holds the
coefficients of diffusion step ``i + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self):
        return len(self.betas)


def make_schedule(T=1000, beta_start=1e-4, beta_end=0.02) -> NoiseSchedule:
    if T < 1:
        raise ConfigError("schedule needs T >= 1")
    if not 0.0 < beta_start < 1.0 or not 0.0 < beta_end < 1.0:
        raise ConfigError("betas must lie in (0, 1)")
    if T > 1 and not beta_start < beta_end:
        raise ConfigError("linear schedule needs beta_start < beta_end")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - betas)
    betas.flags.writeable = False
    alpha_bar.flags.writeable = False
    return NoiseSchedule(betas, alpha_bar)


def timestep_embed(t, dim) -> np.ndarray:
    """Sinusoidal embedding; ``t`` may be an int or an integer array of shape [B].

    Returns [dim] for scalar t, [B, dim] otherwise: first half sin(t*w_i),
    second half cos(t*w_i) with w_i = 10000^(-2i/dim).
    """
    if dim % 2 or dim < 2:
        raise ConfigError(f"timestep embedding dim must be even and >= 2, got {dim}")
    half = dim // 2
    freqs = 10000.0 ** (-2.0 * np.arange(half) / dim)
    args = np.multiply.outer(np.asarray(t, dtype=np.float64), freqs)
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


def mix(z0, eps, alpha_bar):
    """sqrt(alpha_bar) * z0 + sqrt(1 - alpha_bar) * eps (alpha_bar broadcast per row)."""
    a = np.asarray(alpha_bar, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    return np.sqrt(a) * z0 + np.sqrt(1.0 - a) * eps


def diffuse(z0, t, eps, schedule: NoiseSchedule):
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr >= schedule.T):
        raise UsageError(f"timestep {t} outside [0, {schedule.T})")
    return mix(np.asarray(z0, dtype=np.float64), np.asarray(eps, dtype=np.float64),
               schedule.alpha_bar[t_arr])


def ddim_timesteps(T, steps):
    """Evenly spaced indices from 0 to T-1 inclusive, returned in sampling
    (descending) order."""
    if not 1 <= steps <= T:
        raise ConfigError(f"ddim_steps must be in [1, {T}], got {steps}")
    if steps == 1:
        return np.array([T - 1])
    ts = np.round(np.linspace(0, T - 1, steps)).astype(np.int64)
    return ts[::-1].copy()


def ddim_step(x, eps_hat, alpha_bar_t, alpha_bar_prev, eta, noise, clip_x0=None):
    """One DDIM update x_t -> x_prev. ``noise`` is only read when sigma > 0."""
    x0_hat = (x - np.sqrt(1.0 - alpha_bar_t) * eps_hat) / np.sqrt(alpha_bar_t)
    if clip_x0 is not None:
        x0_hat = np.clip(x0_hat, -clip_x0, clip_x0)
        eps_hat = (x - np.sqrt(alpha_bar_t) * x0_hat) / np.sqrt(1.0 - alpha_bar_t)
    sigma = 0.0
    if eta > 0 and alpha_bar_prev < 1.0:
        sigma = eta * np.sqrt((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t)) * np.sqrt(
            1.0 - alpha_bar_t / alpha_bar_prev
        )
    direction = np.sqrt(max(1.0 - alpha_bar_prev - sigma**2, 0.0))
    out = np.sqrt(alpha_bar_prev) * x0_hat + direction * eps_hat
    if sigma > 0:
        out = out + sigma * noise
    return out


def ddim_loop(eps_fn, schedule: NoiseSchedule, steps, eta, rngs, dim, clip_x0=None, x_start=None):
    """Run the reverse process for len(rngs) items, each driven by its own stream.

    ``eps_fn(x, t, i)`` predicts noise for the whole batch at timestep index t,
    sampling-step index i. Each item draws its start noise and per-step noise
    from its own generator, so results do not depend on batch composition.
    ``x_start`` replaces the drawn start noise.
    """
    n = len(rngs)
    if n == 0:
        return np.zeros((0, dim))
    x = np.stack([r.standard_normal(dim) for r in rngs])
    if x_start is not None:
        x = np.array(x_start, dtype=np.float64).reshape(n, dim)
    ts = ddim_timesteps(schedule.T, steps)
    for i, t in enumerate(ts):
        a_t = float(schedule.alpha_bar[t])
        a_prev = float(schedule.alpha_bar[ts[i + 1]]) if i + 1 < len(ts) else 1.0
        eps_hat = np.asarray(eps_fn(x, int(t), i), dtype=np.float64)
        noise = None
        if eta > 0 and a_prev < 1.0:
            noise = np.stack([r.standard_normal(dim) for r in rngs])
        x = ddim_step(x, eps_hat, a_t, a_prev, eta, noise, clip_x0)
    return x
