"""Shared optimization loop for the three trainable stages."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, TrainingError
from .numkernel import AdamW

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 512
    lr: float = 5.12e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    log_every: int = 100
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.log_every < 1:
            raise ConfigError("steps >= 0, batch_size >= 1 and log_every >= 1 required")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")

    def lr_at(self, k):
        if self.lr_schedule == "cosine":
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * k / max(self.steps, 1)))
        return self.lr


def fit(model, step_fn, train: TrainConfig, name="model"):
    """Run ``train.steps`` AdamW steps. ``step_fn(k)`` must run forward and
    backward for step k and return the scalar loss. Returns a list of
    {"step", "loss"} windows averaged over ``log_every`` steps."""
    params = model.named_parameters()
    opt = AdamW(params, train.lr, (train.beta1, train.beta2), weight_decay=train.weight_decay)
    history, window = [], []
    for k in range(train.steps):
        opt.lr = train.lr_at(k)
        model.zero_grad()
        # overflow shows up as a non-finite loss, reported below with the step
        with np.errstate(over="ignore", invalid="ignore"):
            loss = step_fn(k)
        if not math.isfinite(loss):
            raise TrainingError(f"{name} loss diverged ({loss})", step=k)
        opt.step(model.named_grads())
        window.append(loss)
        if len(window) == train.log_every or k == train.steps - 1:
            history.append({"step": k + 1, "loss": sum(window) / len(window)})
            log.info("%s step %d loss %.5f", name, k + 1, history[-1]["loss"])
            window = []
    return history
