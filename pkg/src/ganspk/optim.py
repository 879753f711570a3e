"""SGD and RMSprop over named parameter arrays."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np


class OptimizerError(ValueError):
    pass


@dataclass
class OptimizerState:
    kind: str  # "sgd" or "rmsprop"
    lr: float
    rho: float = 0.9
    eps: float = 1e-8
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ("sgd", "rmsprop"):
            raise OptimizerError(f"unknown optimizer kind {self.kind!r}")
        if self.lr < 0:
            raise OptimizerError("learning rate must be non-negative")
        if not 0.0 < self.rho < 1.0:
            raise OptimizerError("rho must lie in (0, 1)")


def sgd(lr: float) -> OptimizerState:
    return OptimizerState("sgd", lr)


def rmsprop(lr: float, rho: float = 0.9, eps: float = 1e-8) -> OptimizerState:
    return OptimizerState("rmsprop", lr, rho=rho, eps=eps)


def optimizer_step(state: OptimizerState, params: Mapping[str, np.ndarray],
                   grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Return updated parameters; RMSprop accumulators in ``state`` are updated in place.

    Parameters are visited in sorted name order.
    """
    missing = sorted(set(params) - set(grads))
    if missing:
        raise OptimizerError(f"missing gradient for parameters: {', '.join(missing)}")
    out = {}
    for name in sorted(params):
        p, g = params[name], grads[name]
        if p.shape != g.shape:
            raise OptimizerError(f"{name}: parameter shape {p.shape} != gradient shape {g.shape}")
        with np.errstate(over="ignore", invalid="ignore"):
            if state.kind == "sgd":
                new = p - state.lr * g
            else:
                v = state.second_moment.get(name)
                if v is None:
                    v = np.zeros_like(p)
                v = state.rho * v + (1.0 - state.rho) * g * g
                state.second_moment[name] = v
                new = p - state.lr * g / (np.sqrt(v) + state.eps)
        if not np.all(np.isfinite(new)):
            raise OptimizerError(f"non-finite update for parameter {name}")
        out[name] = new
    return out
