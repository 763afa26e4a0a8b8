"""Adam with L2-in-gradient weight decay and a reduce-on-plateau scheduler."""

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ParameterError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads):
    """Update ``params`` in place (classic Adam, bias-corrected).

    Weight decay is the coupled L2 form: ``g + wd * p`` enters both moments.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ParameterError(f"grad shape {g.shape} != param shape {p.shape} for {name}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` once more than ``patience``
    consecutive validations fail to improve on the best value seen.

    Improvement uses a relative ``threshold`` (0 means any strict gain).
    """

    mode: str = "min"
    factor: float = 0.5
    patience: int = 5
    threshold: float = 1e-4
    min_lr: float = 0.0
    best: float = None
    num_bad: int = 0

    def __post_init__(self):
        if self.mode not in ("min", "max"):
            raise ParameterError(f"mode must be 'min' or 'max', got {self.mode!r}")
        if not 0.0 < self.factor < 1.0:
            raise ParameterError(f"factor must lie in (0, 1), got {self.factor}")
        if self.patience < 0:
            raise ParameterError("patience must be >= 0")
        if self.best is None:
            self.best = math.inf if self.mode == "min" else -math.inf

    def is_better(self, metric):
        margin = 0.0 if math.isinf(self.best) else abs(self.best) * self.threshold
        if self.mode == "min":
            return metric < self.best - margin
        return metric > self.best + margin

    def step(self, metric, lr):
        """Record one validation ``metric``; returns the (possibly reduced) lr."""
        metric = float(metric)
        if self.is_better(metric):
            self.best = metric
            self.num_bad = 0
        else:
            self.num_bad += 1
        if self.num_bad > self.patience:
            self.num_bad = 0
            return max(lr * self.factor, self.min_lr)
        return lr


def scheduler_step(scheduler, metric, lr):
    return scheduler.step(metric, lr)
