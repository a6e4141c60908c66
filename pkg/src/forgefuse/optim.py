"""SGD with classical momentum and the warm-up + cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .errors import PreconditionError
from .tensor import Tensor


def lr_schedule(t: float, total_epochs: float, warmup_epochs: float = 5.0,
                lr_max: float = 1e-3, lr_min: float = 1e-6) -> float:
    """Learning rate at epoch progress ``t`` in [0, total_epochs].

    Linear ramp from lr_min to lr_max over the warm-up, then cosine decay
    back to lr_min; the two pieces agree at the junction.
    """
    if total_epochs <= warmup_epochs:
        raise PreconditionError(
            f"total epochs {total_epochs} must exceed warm-up {warmup_epochs}")
    if t < warmup_epochs:
        return lr_min + (lr_max - lr_min) * (t / warmup_epochs)
    s = (t - warmup_epochs) / (total_epochs - warmup_epochs)
    s = min(max(s, 0.0), 1.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * s))


class SgdMomentum:
    """Classical momentum: v <- m*v + g, theta <- theta - lr*v."""

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9):
        self.params = dict(params)
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.data)
                         for name, p in self.params.items()}
        self.step_count = 0

    def step(self, lr: float) -> None:
        m = self.momentum
        for name, p in self.params.items():
            if p.grad is None:
                continue
            if p.grad.shape != p.data.shape:
                raise PreconditionError(
                    f"gradient shape {p.grad.shape} != parameter shape "
                    f"{p.data.shape} for {name!r}")
            v = self.velocity[name]
            v *= m
            v += p.grad
            p.data -= lr * v
        self.step_count += 1

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return self.velocity

    def load_state(self, velocity: dict[str, np.ndarray], step_count: int) -> None:
        for name, arr in velocity.items():
            if name in self.velocity:
                if arr.shape != self.velocity[name].shape:
                    raise PreconditionError(
                        f"momentum buffer shape mismatch for {name!r}")
                self.velocity[name][...] = arr
        self.step_count = step_count
