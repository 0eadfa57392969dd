"""Adam with bias correction, and the step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..tensorcore import DimensionError, Tensor

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float,
              beta1: float = BETA1, beta2: float = BETA2, eps: float = EPS) -> AdamState:
    """Update ``params`` in place and return the advanced state."""
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise DimensionError(f"parameter shape {p.shape} != gradient shape {g.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return state


class Adam:
    def __init__(self, params: list[Tensor]):
        self.params = list(params)
        self.state = AdamState()

    def step(self, lr: float) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_at(epoch: int, config) -> float:
    """``lr_init * decay_factor ** (epoch // decay_every)``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return config.lr_init * config.lr_decay_factor ** (epoch // config.lr_decay_every)
