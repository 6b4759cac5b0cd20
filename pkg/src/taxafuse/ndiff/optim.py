"""Plain SGD with per-group learning rates and plateau LR reduction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class DivergenceError(RuntimeError):
    """Non-finite gradient or loss: the training run has diverged."""


@dataclass
class ParameterGroup:
    """A set of parameters sharing one learning rate (e.g. conv vs head)."""

    params: list[Tensor]
    lr: float
    name: str = ""

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


class SGD:
    """p <- p - lr_group * grad(p); gradients are zeroed after every step."""

    def __init__(self, groups: list[ParameterGroup]):
        self.groups = groups

    def step(self) -> None:
        for group in self.groups:
            for p in group.params:
                if p.grad is None:
                    continue
                if not np.isfinite(p.grad).all():
                    raise DivergenceError(
                        f"non-finite gradient in parameter {p.name or '<unnamed>'}"
                    )
                p.data -= group.lr * p.grad
        self.zero_grad()

    def zero_grad(self) -> None:
        for group in self.groups:
            for p in group.params:
                p.grad = None

    def learning_rates(self) -> dict[str, float]:
        return {g.name or f"group{i}": g.lr for i, g in enumerate(self.groups)}


class ReduceLROnPlateau:
    """Multiply every group's LR by ``factor`` after ``patience`` epochs
    without improvement of the monitored metric; never below ``min_lr``."""

    def __init__(
        self,
        optimizer: SGD,
        patience: int = 5,
        factor: float = 0.5,
        min_lr: float = 1e-8,
        mode: str = "min",
    ):
        if not 0.0 < factor < 1.0:
            raise ValueError(f"factor must be in (0, 1), got {factor}")
        if patience < 1:
            raise ValueError(f"patience must be >= 1, got {patience}")
        if mode not in ("min", "max"):
            raise ValueError(f"mode must be 'min' or 'max', got {mode!r}")
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.min_lr = min_lr
        self.mode = mode
        self.best: float | None = None
        self.bad_epochs = 0
        self.history: list[float] = []

    def _improved(self, metric: float) -> bool:
        if self.best is None:
            return True
        return metric < self.best if self.mode == "min" else metric > self.best

    def step(self, metric: float) -> bool:
        """Record one epoch's metric; returns True when LRs were reduced."""
        if not np.isfinite(metric):
            raise DivergenceError(f"non-finite scheduler metric {metric!r}")
        self.history.append(float(metric))
        if self._improved(metric):
            self.best = float(metric)
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            for group in self.optimizer.groups:
                group.lr = max(group.lr * self.factor, self.min_lr)
            self.bad_epochs = 0
            return True
        return False
