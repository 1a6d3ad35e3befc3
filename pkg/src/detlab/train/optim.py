"""SGD with momentum and the learning-rate schedules.

The update is v <- m*v + g; w <- w - lr(step) * (v + wd*w), applied only to
trainable parameters that received a gradient this step. Frozen parameters
are byte-untouched; a gradient surfacing on one is an internal invariant
violation and fails loudly.

Full-scale reference hyperparameters (batch 64, lr 0.08, 72- or 600-epoch
schedules) are recorded as constants; desk-scale defaults keep the same
lr/batch ratio at laptop size (batch 8, lr 0.01).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigurationError

FULL_SCALE_REFERENCE = {
    "batch_size": 64,
    "base_lr": 0.08,
    "epochs_short": 72,
    "epochs_long": 600,
}

WARMUP_FRACTION_CAP = 0.05


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 4e-5
    epochs: int = 8
    schedule: str = "cosine"
    warmup_steps: int = 500
    seed: int = 1

    def validate(self):
        if self.base_lr <= 0:
            raise ConfigurationError("base_lr must be > 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.schedule not in ("cosine", "step"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigurationError("momentum must be in [0, 1)")

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        known = set(TrainConfig.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown TrainConfig keys: {sorted(unknown)}")
        cfg = TrainConfig(**d)
        cfg.validate()
        return cfg


def effective_warmup(config, total_steps):
    """Linear warmup length: the configured cap or 5% of the run, whichever is smaller."""
    frac = max(1, int(WARMUP_FRACTION_CAP * total_steps))
    return min(config.warmup_steps, frac)


STEP_MILESTONES = (2.0 / 3.0, 8.0 / 9.0)
STEP_FACTOR = 0.1


def lr_at(step, total_steps, config):
    """Closed-form schedule value at an integer step index (0-based)."""
    w = effective_warmup(config, total_steps)
    if step < w:
        return config.base_lr * (step + 1) / w
    if total_steps <= w:
        return config.base_lr
    t = (step - w) / (total_steps - w)
    if config.schedule == "cosine":
        return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * t))
    drops = sum(1 for m in STEP_MILESTONES if t >= m)
    return config.base_lr * STEP_FACTOR**drops


class SGD:
    def __init__(self, model, config):
        config.validate()
        self.model = model
        self.config = config
        self.velocity = {}

    def zero_grad(self):
        for _, p in self.model.named_parameters():
            p.grad = None

    def step(self, lr):
        cfg = self.config
        for name, p in self.model.named_parameters():
            if p.grad is None:
                continue
            if not p.trainable:
                raise RuntimeError(
                    f"internal invariant violation: frozen parameter {name!r} has a gradient"
                )
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            v = cfg.momentum * v + p.grad
            self.velocity[name] = v
            p.data -= lr * (v + cfg.weight_decay * p.data)
