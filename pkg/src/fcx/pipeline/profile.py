"""Complexity profiles, the linear performance regressor, and PCA export."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from fcx.core.stats import variance_of
from fcx.errors import (
    DegenerateFeature,
    EmptyInput,
    InvalidShape,
    InvalidSplit,
    MissingDepth,
    Underdetermined,
)

RIDGE_LAMBDA = 1e-8


@dataclass
class ComplexityProfile:
    """Reliable increments for every depth, then unreliable increments."""

    depths: list[int]
    values: np.ndarray

    @property
    def reliable(self) -> np.ndarray:
        return self.values[:len(self.depths)]

    @property
    def unreliable(self) -> np.ndarray:
        return self.values[len(self.depths):]

    def to_dict(self) -> dict:
        return {"depths": list(self.depths), "values": [float(v) for v in self.values]}


def complexity_profile(splits: Mapping[int, tuple[np.ndarray, np.ndarray]],
                       depths: Sequence[int], var_f: float) -> ComplexityProfile:
    """Variance of consecutive reliable / unreliable differences over ``Var[f]``.

    ``splits[l]`` is ``(reliable, unreliable)`` at depth ``l``; the step before
    the first depth is measured from zero.
    """
    missing = [d for d in depths if d not in splits]
    if missing:
        raise MissingDepth(f"no split for depths {missing}")
    if not var_f > 0:
        raise DegenerateFeature("Var[f] must be positive")
    reli, unreli = [], []
    prev_r = prev_u = None
    for d in depths:
        r, u = splits[d]
        reli.append(variance_of(r if prev_r is None else r - prev_r) / var_f)
        unreli.append(variance_of(u if prev_u is None else u - prev_u) / var_f)
        prev_r, prev_u = r, u
    return ComplexityProfile(list(depths), np.array(reli + unreli))


# --- regression -------------------------------------------------------------

@dataclass
class RegressionModel:
    alpha: np.ndarray
    beta: np.ndarray
    bias: float
    target_kind: str = "accuracy"
    ridge_used: bool = False

    @property
    def weights(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta])

    def predict(self, profiles) -> np.ndarray:
        return np.asarray(profiles, dtype=np.float64) @ self.weights + self.bias

    def to_dict(self) -> dict:
        return {"alpha": self.alpha.tolist(), "beta": self.beta.tolist(),
                "bias": float(self.bias), "target_kind": self.target_kind,
                "ridge_used": self.ridge_used}


def fit_regressor(profiles, targets, target_kind: str = "accuracy",
                  ridge: bool = False) -> RegressionModel:
    """Least squares via normal equations on column-scaled profiles.

    Rank-deficient designs fall back to a ridge term (bias unpenalised).
    ``ridge=True`` forces that path and allows fewer samples than unknowns.
    """
    X = np.asarray(profiles, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64).ravel()
    if X.ndim != 2 or len(X) != len(y):
        raise InvalidShape(f"profiles {X.shape} do not match targets {y.shape}")
    n, d = X.shape
    if d % 2:
        raise InvalidShape("profile length must be even (reliable + unreliable)")
    if n < d + 1 and not ridge:
        raise Underdetermined(f"{n} samples for {d + 1} unknowns")
    scale = np.abs(X).max(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    A = np.concatenate([X / scale, np.ones((n, 1))], axis=1)
    gram = A.T @ A
    rhs = A.T @ y
    use_ridge = ridge or np.linalg.matrix_rank(A) < d + 1
    if use_ridge:
        pen = np.full(d + 1, RIDGE_LAMBDA * max(1.0, np.trace(gram) / (d + 1)))
        pen[-1] = 0.0
        gram = gram + np.diag(pen)
    w = np.linalg.solve(gram, rhs)
    coef = w[:-1] / scale
    return RegressionModel(coef[:d // 2], coef[d // 2:], float(w[-1]), target_kind,
                           bool(use_ridge))


@dataclass
class CVResult:
    mae: list[float]
    baseline_mae: list[float]
    splits: list[list[int]] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.mae))

    @property
    def median(self) -> float:
        return float(np.median(self.mae))

    @property
    def baseline_median(self) -> float:
        return float(np.median(self.baseline_mae))

    def to_dict(self) -> dict:
        return {"mae": self.mae, "baseline_mae": self.baseline_mae, "mean": self.mean,
                "median": self.median, "baseline_median": self.baseline_median}


def split_sequence(n: int, train_k: int, test_k: int, repeats: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [rng.permutation(n)[:train_k + test_k] for _ in range(repeats)]


def cross_validate(profiles, targets, train_k: int, test_k: int, repeats: int = 100,
                   seed: int = 0, ridge: bool = False) -> CVResult:
    """Repeated random train/test splits; MAE of the regressor and of the train mean."""
    X = np.asarray(profiles, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64).ravel()
    if train_k < 1 or test_k < 1 or train_k + test_k > len(X):
        raise InvalidSplit(f"train {train_k} + test {test_k} vs population {len(X)}")
    if repeats < 1:
        raise InvalidSplit("repeats must be >= 1")
    mae, base, splits = [], [], []
    for perm in split_sequence(len(X), train_k, test_k, repeats, seed):
        tr, te = perm[:train_k], perm[train_k:]
        model = fit_regressor(X[tr], y[tr], ridge=ridge)
        mae.append(float(np.mean(np.abs(model.predict(X[te]) - y[te]))))
        base.append(float(np.mean(np.abs(y[tr].mean() - y[te]))))
        splits.append(perm.tolist())
    return CVResult(mae, base, splits)


# --- PCA -------------------------------------------------------------------

@dataclass
class PCAResult:
    coords: np.ndarray
    components: np.ndarray
    explained: np.ndarray
    mean: np.ndarray
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {"coords": self.coords.tolist(), "components": self.components.tolist(),
                "explained": self.explained.tolist(), "degenerate": self.degenerate}


def _top_eigvec(C: np.ndarray, tol: float, max_iter: int) -> tuple[np.ndarray, float]:
    v = np.random.default_rng(0).normal(size=len(C))
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = C @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return v, 0.0
        w /= norm
        if min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol:
            v = w
            break
        v = w
    return v, float(v @ C @ v)


def pca2d(profiles, tol: float = 1e-10, max_iter: int = 100_000) -> PCAResult:
    """Top-2 principal axes by power iteration with deflation.

    Each axis is signed so its largest-magnitude coordinate is positive.
    """
    X = np.asarray(profiles, dtype=np.float64)
    if X.ndim != 2:
        raise InvalidShape(f"profiles must be 2-d, got {X.shape}")
    if len(X) < 3:
        raise EmptyInput("PCA needs at least 3 profiles")
    mean = X.mean(axis=0)
    Xc = X - mean
    C = Xc.T @ Xc / (len(X) - 1)
    total = float(np.trace(C))
    comps, lams = [], []
    degenerate = False
    floor = 1e-12 * max(total, 1e-300)
    for _ in range(2):
        if total <= 0:
            v, lam = np.zeros(X.shape[1]), 0.0
        else:
            v, lam = _top_eigvec(C, tol, max_iter)
        if lam <= floor:
            v, lam = np.zeros(X.shape[1]), 0.0
            degenerate = True
        else:
            if v[np.argmax(np.abs(v))] < 0:
                v = -v
            C = C - lam * np.outer(v, v)
        comps.append(v)
        lams.append(lam)
    W = np.stack(comps)
    explained = np.array(lams) / total if total > 0 else np.zeros(2)
    return PCAResult(Xc @ W.T, W, explained, mean, degenerate)
