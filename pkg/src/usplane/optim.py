"""ADAM optimizer with bias correction and a plateau learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """Per-parameter first/second moment buffers plus hyperparameters."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, tensors: dict, lr: float = 1e-4, **kw) -> "AdamState":
        state = cls(lr=lr, **kw)
        for name, t in tensors.items():
            state.m[name] = np.zeros_like(t.value)
            state.v[name] = np.zeros_like(t.value)
        return state


def adam_step(state: AdamState, tensors: dict) -> None:
    """One bias-corrected ADAM update, in place on the tensor values.

    Every tensor must carry a populated, finite gradient; a missing or
    non-finite gradient aborts before any value is touched.
    """
    grads = {}
    for name, t in tensors.items():
        if t.grad is None:
            raise ValueError(f"parameter {name} has no gradient")
        if not np.all(np.isfinite(t.grad)):
            raise ValueError(f"non-finite gradient in parameter {name}")
        grads[name] = t.grad
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, t in tensors.items():
        g = grads[name]
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        t.value -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(t.dtype, copy=False)


@dataclass
class PlateauScheduler:
    """Halve the learning rate on plateau; stop when the plateau persists.

    A plateau is `patience` consecutive evaluations without a relative
    improvement of at least `min_improvement` over the best seen value.
    """

    patience: int = 3
    early_stop_patience: int = 9
    factor: float = 0.5
    min_improvement: float = 0.01
    best: float = np.inf
    since_improve: int = 0

    def update(self, value: float) -> str:
        """Record one evaluation; returns 'none', 'halve' or 'stop'."""
        if value < self.best * (1.0 - self.min_improvement) or not np.isfinite(self.best):
            self.best = value
            self.since_improve = 0
            return "none"
        self.since_improve += 1
        if self.since_improve >= self.early_stop_patience:
            return "stop"
        if self.since_improve % self.patience == 0:
            return "halve"
        return "none"
