from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from fcx.core.tensor import Tensor, backprop


@dataclass
class GradCheckReport:
    passed: bool
    checked: int
    max_rel_err: float
    failures: list[tuple[int, tuple[int, ...], float, float]] = field(default_factory=list)
    skipped: int = 0


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(forward: Callable[[], Tensor], params: Sequence[Tensor],
               tolerance: float = 1e-4, eps: float = 1e-4, max_coords: int = 1000,
               seed: int = 0,
               grad_override: Callable[[list[np.ndarray]], list[np.ndarray]] | None = None,
               pattern: Callable[[], np.ndarray] | None = None,
               ) -> GradCheckReport:
    """Compare backprop against central differences on sampled coordinates.

    ``forward`` must be pure and rebuild the graph from ``params`` on every
    call. ``grad_override`` lets a caller tamper with the analytic gradients
    (negative controls). When ``pattern`` is given it should return the
    current ReLU on/off pattern; coordinates whose ``+eps`` and ``-eps``
    patterns differ straddle a kink and are skipped, and sampling continues
    until ``max_coords`` smooth coordinates have been checked.
    """
    grads = [g.copy() for g in backprop(forward(), params)]
    if grad_override is not None:
        grads = grad_override(grads)
    coords = [(pi, idx) for pi, p in enumerate(params) for idx in np.ndindex(p.shape)]
    order = np.random.default_rng(seed).permutation(len(coords))
    failures = []
    worst = 0.0
    checked = skipped = 0
    for ci in order:
        if checked == max_coords:
            break
        pi, idx = coords[ci]
        p = params[pi]
        orig = p.data[idx]
        p.data[idx] = orig + eps
        up = forward().item()
        up_pattern = pattern() if pattern is not None else None
        p.data[idx] = orig - eps
        down = forward().item()
        crossed = pattern is not None and not np.array_equal(up_pattern, pattern())
        p.data[idx] = orig
        if crossed:
            skipped += 1
            continue
        checked += 1
        numeric = (up - down) / (2 * eps)
        analytic = float(grads[pi][idx])
        err = relative_error(analytic, numeric)
        worst = max(worst, err)
        if err > tolerance:
            failures.append((pi, idx, analytic, numeric))
    return GradCheckReport(not failures, checked, worst, failures, skipped)
