"""Mini-batch training loop shared by every trained component."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from fcx.core.optim import make_optimizer, opt_step
from fcx.core.tensor import Tensor, backprop
from fcx.errors import TrainingDiverged, ValidationError


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    tol: float = 1e-5
    patience: int = 10
    lr_schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if self.tol <= 0 or self.lr <= 0:
            raise ValidationError("tolerance and learning rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValidationError(f"unknown lr schedule {self.lr_schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def fit(params: dict[str, Tensor], loss_fn: Callable[[np.ndarray], Tensor],
        n_samples: int, cfg: TrainConfig,
        after_step: Callable[[], None] | None = None) -> list[float]:
    """Minimise ``loss_fn(batch_indices)`` over ``params`` in place.

    Stops after ``cfg.epochs`` epochs or once the epoch-mean loss improved by
    less than ``cfg.tol`` (relative) over the last ``cfg.patience`` epochs.
    Returns the per-epoch mean losses.
    """
    plist = list(params.values())
    state = make_optimizer(cfg.optimizer, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    history: list[float] = []
    for epoch in range(cfg.epochs):
        if cfg.lr_schedule == "cosine":
            state.lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))
        order = rng.permutation(n_samples)
        total = 0.0
        for start in range(0, n_samples, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = loss_fn(idx)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            backprop(loss, plist)
            opt_step(state, plist)
            if after_step is not None:
                after_step()
            total += value * len(idx)
        history.append(total / n_samples)
        p = cfg.patience
        if len(history) > p:
            past = history[-p - 1]
            if past <= 0 or (past - history[-1]) / past < cfg.tol:
                break
    return history
