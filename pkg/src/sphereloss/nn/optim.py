"""SGD with momentum and per-group weight-decay multipliers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ConfigInvalid, NonFiniteGradient
from ..losses import MarginLossSpec


@dataclass(frozen=True)
class LossStage:
    """A loss spec active on steps ``[start, stop)``."""

    spec: MarginLossSpec
    start: int
    stop: int


@dataclass
class TrainConfig:
    """Optimizer and schedule settings.

    ``lr_schedule`` is a list of ``(step, lr)`` pairs; the rate at step ``t`` is
    the one attached to the last entry with ``step <= t``.  ``wd_mult`` maps a
    parameter-group name to a multiplier on ``weight_decay`` (missing groups
    use 1).
    """

    lr_schedule: list = field(default_factory=lambda: [(0, 0.1)])
    momentum: float = 0.9
    weight_decay: float = 5e-4
    wd_mult: dict = field(default_factory=lambda: {"embedding": 10.0})
    batch_size: int = 128
    max_steps: int = 2000
    seed: int = 0
    loss_stages: list = field(default_factory=list)

    def __post_init__(self):
        self.lr_schedule = sorted((int(s), float(lr)) for s, lr in self.lr_schedule)
        self.validate()

    def validate(self):
        if not 0 <= self.momentum < 1:
            raise ConfigInvalid(f"momentum must be in [0, 1), got {self.momentum}")
        if not self.lr_schedule or self.lr_schedule[0][0] != 0:
            raise ConfigInvalid("lr_schedule must start at step 0")
        if any(lr <= 0 for _, lr in self.lr_schedule):
            raise ConfigInvalid("learning rates must be > 0")
        if self.weight_decay < 0 or any(v < 0 for v in self.wd_mult.values()):
            raise ConfigInvalid("weight decay and wd_mult values must be >= 0")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ConfigInvalid("batch_size must be >= 1 and max_steps >= 0")
        if self.max_steps > 0:
            if not self.loss_stages:
                raise ConfigInvalid("at least one loss stage is required")
            expected = 0
            for stage in self.loss_stages:
                if stage.start != expected or stage.stop <= stage.start:
                    raise ConfigInvalid("loss stages must tile [0, max_steps) in order without gaps or overlap")
                expected = stage.stop
            if expected != self.max_steps:
                raise ConfigInvalid(f"loss stages end at {expected}, max_steps is {self.max_steps}")

    def lr_at(self, step: int) -> float:
        lr = self.lr_schedule[0][1]
        for start, value in self.lr_schedule:
            if start <= step:
                lr = value
        return lr

    def stage_at(self, step: int) -> LossStage:
        for stage in self.loss_stages:
            if stage.start <= step < stage.stop:
                return stage
        raise ConfigInvalid(f"no loss stage covers step {step}")

    @staticmethod
    def single_stage(spec: MarginLossSpec, max_steps: int, **kw) -> "TrainConfig":
        return TrainConfig(max_steps=max_steps, loss_stages=[LossStage(spec, 0, max_steps)] if max_steps else [], **kw)


def sgd_step(params: dict, grads: dict, config: TrainConfig, state: dict, groups: dict | None = None, lr: float | None = None):
    """One in-place momentum-SGD update with coupled weight decay.

    ``g' = g + weight_decay * wd_mult[group] * w``; ``v = momentum * v + g'``;
    ``w -= lr * v``.  ``state`` holds the velocities and is updated in place.

    Raises:
        NonFiniteGradient: before touching any parameter, if a gradient is NaN/inf.
    """
    groups = groups or {}
    lr = config.lr_at(state.get("step", 0)) if lr is None else lr
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    velocity = state.setdefault("velocity", {})
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            continue
        decay = config.weight_decay * config.wd_mult.get(groups.get(name, "body"), 1.0)
        eff = g + decay * w if decay else g
        v = velocity.get(name)
        v = np.array(eff, copy=True) if v is None else config.momentum * v + eff
        velocity[name] = v
        w -= lr * v
    state["step"] = state.get("step", 0) + 1
    return params, state
