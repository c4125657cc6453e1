"""SGD with momentum under the poly learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

from gatedscale.errors import ConfigError, TapeError
from gatedscale.params import ParamStore


@dataclass
class OptimState:
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    power: float = 0.9
    max_iter: int = 400
    current_iter: int = 0

    def __post_init__(self):
        if self.max_iter <= 0:
            raise ConfigError(f"max_iter must be positive, got {self.max_iter}")
        if self.base_lr < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError(
                f"bad optimizer settings lr={self.base_lr} momentum={self.momentum} wd={self.weight_decay}"
            )
        if not 0 <= self.current_iter <= self.max_iter:
            raise ConfigError(f"current_iter {self.current_iter} outside [0, {self.max_iter}]")


def poly_lr(state: OptimState) -> float:
    """base_lr * (1 - iter / max_iter) ** power."""
    return state.base_lr * (1.0 - state.current_iter / state.max_iter) ** state.power


def sgd_step(params: ParamStore, state: OptimState) -> float:
    """One momentum step on every trainable entry; returns the learning rate used.

    v <- momentum * v + (grad + wd * param) where the entry decays, then
    param <- param - lr * v. Gradients are zeroed afterwards.
    """
    if state.current_iter >= state.max_iter:
        raise ConfigError(f"optimizer already ran its {state.max_iter} iterations")
    lr = poly_lr(state)
    dtype = params.dtype.type
    for name, entry in params.trainable():
        t = entry.tensor
        if t.grad is None:
            raise TapeError(f"parameter {name} has no gradient; run backward first")
        g = t.grad
        if entry.decay and state.weight_decay:
            g = g + dtype(state.weight_decay) * t.data
        entry.momentum[...] = dtype(state.momentum) * entry.momentum + g
        t.data[...] = t.data - dtype(lr) * entry.momentum
        t.zero_grad()
    state.current_iter += 1
    return lr
