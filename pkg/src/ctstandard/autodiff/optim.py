"""Stochastic gradient descent with momentum."""

from __future__ import annotations

from typing import Dict, Iterable, Mapping, Optional

import numpy as np

from .tensor import Tensor


class MissingGradientError(KeyError):
    """A parameter scheduled for an update has no gradient entry."""


def sgd_momentum_step(
    params: Iterable[Tensor],
    grads: Mapping[Tensor, np.ndarray],
    lr: float,
    momentum: float,
    velocity: Optional[Dict[Tensor, np.ndarray]] = None,
) -> Dict[Tensor, np.ndarray]:
    """Update ``params`` in place: ``v <- momentum*v + g``, ``p <- p - lr*v``.

    Returns the velocity map (the same dict when one is passed in).
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    if velocity is None:
        velocity = {}
    params = list(params)
    for p in params:
        if p not in grads:
            raise MissingGradientError(f"no gradient for parameter {p.name or p!r}")
    for p in params:
        g = grads[p]
        v = velocity.get(p)
        v = g.astype(p.dtype, copy=True) if v is None else momentum * v + g
        velocity[p] = v
        p.data -= (lr * v).astype(p.dtype, copy=False)
    return velocity


class SGD:
    """Momentum SGD over a fixed parameter list."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-4, momentum: float = 0.5):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity: Dict[Tensor, np.ndarray] = {}

    def step(self, grads: Mapping[Tensor, np.ndarray]) -> None:
        sgd_momentum_step(self.params, grads, self.lr, self.momentum, self.velocity)

    def state(self) -> Dict[str, np.ndarray]:
        return {p.name: self.velocity[p].copy() for p in self.params if p in self.velocity}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        self.velocity = {p: state[p.name].copy() for p in self.params if p.name in state}
