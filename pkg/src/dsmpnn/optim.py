"""Adam and the two learning-rate schedules used for training."""

from __future__ import annotations

import math

import numpy as np


class NonFiniteGradient(ArithmeticError):
    pass


class Adam:
    """Adam with bias correction; L2 weight decay is folded into the gradient."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self, params, lr: float) -> None:
        for name, t in params.items():
            if t.grad is not None and not np.isfinite(t.grad).all():
                raise NonFiniteGradient(f"non-finite gradient in {name}")
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.step_count
        c2 = 1 - b2 ** self.step_count
        for name, t in params.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            if self.weight_decay:
                g = g + self.weight_decay * t.data
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            t.data -= update.astype(t.dtype, copy=False)


def adam_step(params, state: Adam, lr: float) -> None:
    state.step(params, lr)


def onecycle_lr(step: int, total_steps: int, lr_max: float, pct_start: float = 0.3,
                div_factor: float = 25.0, final_div: float = 1e4) -> float:
    """Cosine warm-up from lr_max/div_factor to lr_max, then cosine decay to lr_max/final_div."""
    peak = pct_start * total_steps
    lo = lr_max / div_factor
    end = lr_max / final_div
    if step <= peak:
        frac = step / peak if peak > 0 else 1.0
        return lo + (lr_max - lo) * (1 - math.cos(math.pi * frac)) / 2
    frac = min((step - peak) / max(total_steps - peak, 1e-12), 1.0)
    return end + (lr_max - end) * (1 + math.cos(math.pi * frac)) / 2


class PlateauScheduler:
    """Halve the rate when the epoch loss has not improved (relative 1e-4) for ``patience`` epochs."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 10, threshold: float = 1e-4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, loss: float) -> float:
        if loss < self.best * (1 - self.threshold):
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs > self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


def schedule_lr(kind: str, step: int, total_steps: int, lr_max: float, plateau: PlateauScheduler | None = None) -> float:
    if kind == "onecycle":
        return onecycle_lr(step, total_steps, lr_max)
    if kind == "plateau":
        return plateau.lr if plateau is not None else lr_max
    raise ValueError(f"unknown scheduler {kind!r}")
