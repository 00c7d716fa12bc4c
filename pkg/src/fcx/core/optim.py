"""SGD and Adam over lists of :class:`~fcx.core.tensor.Tensor` parameters."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from fcx.core.tensor import Tensor
from fcx.errors import ShapeMismatch, ValidationError


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def make_optimizer(kind: str = "adam", lr: float = 1e-3, **kw) -> OptimizerState:
    if kind not in ("sgd", "adam"):
        raise ValidationError(f"unknown optimizer {kind!r}")
    return OptimizerState(kind=kind, lr=lr, **kw)


def opt_step(state: OptimizerState, params: Sequence[Tensor],
             grads: Sequence[np.ndarray] | None = None) -> OptimizerState:
    """Apply one in-place update to ``params`` and advance ``state``."""
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise ShapeMismatch("one gradient per parameter required")
    for p, g in zip(params, grads):
        if g is None or g.shape != p.shape:
            raise ShapeMismatch(f"gradient shape {None if g is None else g.shape} "
                                f"does not match parameter {p.shape}")
    state.step_count += 1
    if state.kind == "sgd":
        for p, g in zip(params, grads):
            p.data -= state.lr * g
        return state
    if not state.m:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state
