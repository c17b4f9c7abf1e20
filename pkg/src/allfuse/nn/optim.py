"""SGD-with-momentum and RMSprop, the two optimizers in the tuning space."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError

RMS_EPS = 1e-8


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    momentum: float = 0.0
    decay_rate: float = 0.9
    accumulators: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("SGD", "RMSprop"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0.0 <= self.decay_rate < 1.0:
            raise ValueError("decay_rate must lie in [0, 1)")


def init_state(kind, params, learning_rate, momentum=0.0, decay_rate=0.9) -> OptimizerState:
    state = OptimizerState(kind, learning_rate, momentum, decay_rate)
    for name, p in params.items():
        state.accumulators[name] = np.zeros_like(p.data)
    return state


def _check(params, grads, state):
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape or state.accumulators[name].shape != p.data.shape:
            raise ShapeError(
                f"{name}: param {p.data.shape}, grad {g.shape}, "
                f"accumulator {state.accumulators[name].shape}"
            )


def sgd_step(params, grads, state: OptimizerState):
    """v <- m*v + g ; theta <- theta - lr*v (in place)."""
    _check(params, grads, state)
    lr = state.learning_rate
    for name, p in params.items():
        v = state.accumulators[name]
        v *= state.momentum
        v += grads[name]
        p.data -= (lr * v).astype(p.data.dtype)


def rmsprop_step(params, grads, state: OptimizerState):
    """s <- rho*s + (1-rho)*g^2 ; theta <- theta - lr*g/sqrt(s + eps) (in place)."""
    _check(params, grads, state)
    lr, rho = state.learning_rate, state.decay_rate
    for name, p in params.items():
        g = grads[name]
        s = state.accumulators[name]
        s *= rho
        s += (1 - rho) * g * g
        p.data -= (lr * g / np.sqrt(s + RMS_EPS)).astype(p.data.dtype)


def step(params, grads, state: OptimizerState):
    if state.kind == "SGD":
        sgd_step(params, grads, state)
    else:
        rmsprop_step(params, grads, state)
