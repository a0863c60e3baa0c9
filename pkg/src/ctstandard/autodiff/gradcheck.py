"""Central finite-difference gradient verification."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Sequence, Tuple, Union

import numpy as np

from .tensor import Tape, Tensor, backward


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    excluded: List[Tuple[int, int]] = field(default_factory=list)
    worst: Tuple[int, int] = (-1, -1)

    def __float__(self) -> float:
        return self.max_rel_error


def grad_check(
    f: Callable[..., Tensor],
    point: Union[Tensor, Sequence[Tensor]],
    epsilon: float = 1e-5,
    kink_tol: float = 1e-4,
) -> GradCheckResult:
    """Compare tape gradients of ``f(*point)`` with central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    When the one-sided slopes disagree by more than ``kink_tol`` the step is
    halved: a gap that does not shrink with the step marks a kink, and the
    coordinate is listed in ``excluded`` instead of counted.
    Excluded entries are ``(tensor_index, flat_index)`` pairs.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    points = [point] if isinstance(point, Tensor) else list(point)
    for p in points:
        if p.dtype != np.float64:
            raise ValueError("grad_check needs float64 tensors")
        p.requires_grad = True

    with Tape() as tape:
        loss = f(*points)
    grads = backward(loss, tape)

    def evaluate() -> float:
        return float(f(*points).data)

    f0 = evaluate()
    result = GradCheckResult(0.0, 0)
    for ti, p in enumerate(points):
        analytic = grads.get(p, np.zeros_like(p.data)).reshape(-1)
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]

            def slopes(h):
                flat[k] = orig + h
                fp = evaluate()
                flat[k] = orig - h
                fm = evaluate()
                flat[k] = orig
                return (fp - f0) / h, (f0 - fm) / h, (fp - fm) / (2 * h)

            right, left, central = slopes(epsilon)
            gap = abs(right - left)
            if gap > kink_tol * max(1.0, abs(central)):
                right2, left2, central2 = slopes(epsilon / 2)
                gap2 = abs(right2 - left2)
                if gap2 > 0.75 * gap:
                    result.excluded.append((ti, k))
                    continue
                central = central2
            err = abs(analytic[k] - central) / max(1.0, abs(analytic[k]))
            result.checked += 1
            if err > result.max_rel_error:
                result.max_rel_error = err
                result.worst = (ti, k)
    return result
