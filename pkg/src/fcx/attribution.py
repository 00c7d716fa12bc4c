"""Shapley attribution of task loss and over-fitting gap to feature components."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from fcx.core.tensor import log_softmax
from fcx.disentangler import FeatureDecomposition
from fcx.errors import (
    IncompatibleDecomposition,
    MissingSplit,
    TooManyPlayers,
    ValidationError,
)
from fcx.zoo import Network

MAX_EXACT_PLAYERS = 20


def _mask(subset: Iterable[int] | int) -> int:
    if isinstance(subset, (int, np.integer)):
        return int(subset)
    m = 0
    for i in subset:
        m |= 1 << int(i)
    return m


def members(mask: int, n: int) -> list[int]:
    return [i for i in range(n) if mask >> i & 1]


class CoalitionGame:
    """A set function over ``n_players`` with a per-subset value cache.

    ``value_fn`` receives a sorted list of player indices.
    """

    def __init__(self, n_players: int, value_fn: Callable[[list[int]], float], name: str = ""):
        self.n_players = int(n_players)
        self.value_fn = value_fn
        self.name = name
        self.cache: dict[int, float] = {}
        self.evaluations = 0

    def value(self, subset: Iterable[int] | int) -> float:
        m = _mask(subset)
        if m not in self.cache:
            self.evaluations += 1
            self.cache[m] = float(self.value_fn(members(m, self.n_players)))
        return self.cache[m]

    def table(self) -> np.ndarray:
        """Values of all ``2**n`` subsets indexed by bitmask."""
        return np.array([self.value(m) for m in range(1 << self.n_players)])


def table_game(values: Sequence[float], name: str = "") -> CoalitionGame:
    """Game defined by an explicit bitmask-indexed value table."""
    values = np.asarray(values, dtype=np.float64)
    n = int(round(math.log2(len(values))))
    if 1 << n != len(values):
        raise ValidationError("value table length must be a power of two")
    return CoalitionGame(n, lambda s: values[_mask(s)], name)


def exact_shapley(game: CoalitionGame) -> np.ndarray:
    n = game.n_players
    if n > MAX_EXACT_PLAYERS:
        raise TooManyPlayers(f"{n} players exceeds the exact limit {MAX_EXACT_PLAYERS}")
    v = game.table()
    masks = np.arange(1 << n)
    sizes = np.array([bin(m).count("1") for m in masks])
    weights = np.array([math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n)
                        if s < n else 0.0 for s in range(n + 1)])
    phi = np.zeros(n)
    for i in range(n):
        without = masks[(masks >> i & 1) == 0]
        phi[i] = np.sum(weights[sizes[without]] * (v[without | (1 << i)] - v[without]))
    return phi


@dataclass
class SampledShapley:
    phi: np.ndarray
    stderr: np.ndarray
    permutations: int


def sampled_shapley(game: CoalitionGame, permutations: int = 1000, seed: int = 0) -> SampledShapley:
    """Permutation-sampling estimate with per-player standard errors."""
    if permutations < 1:
        raise ValidationError("permutations must be >= 1")
    n = game.n_players
    rng = np.random.default_rng(seed)
    marg = np.zeros((permutations, n))
    for p in range(permutations):
        mask = 0
        prev = game.value(0)
        for i in rng.permutation(n):
            mask |= 1 << int(i)
            cur = game.value(mask)
            marg[p, i] = cur - prev
            prev = cur
    stderr = marg.std(axis=0, ddof=1) / math.sqrt(permutations) if permutations > 1 \
        else np.full(n, np.inf)
    return SampledShapley(marg.mean(axis=0), stderr, permutations)


# --- task-loss games ------------------------------------------------------

def task_loss(teacher: Network, features_raw: np.ndarray, targets: np.ndarray) -> float:
    """Mean task loss of the teacher head applied to raw-space features."""
    out = teacher.head(features_raw)
    if teacher.spec.loss == "ce":
        lsm = log_softmax(out)
        return float(-lsm[np.arange(len(out)), np.asarray(targets, dtype=np.int64)].mean())
    d = out - np.asarray(targets, dtype=np.float64).reshape(out.shape)
    return float(np.mean(d * d))


def _check(dec: FeatureDecomposition, teacher: Network, targets) -> None:
    if tuple(dec.feature.shape[1:]) != tuple(teacher.spec.feature_shape):
        raise IncompatibleDecomposition(
            f"decomposition feature {dec.feature.shape[1:]} vs teacher tap "
            f"{teacher.spec.feature_shape}")
    if len(targets) != dec.n_samples:
        raise IncompatibleDecomposition("targets do not match decomposition samples")


def _loss_of(dec: FeatureDecomposition, teacher: Network, targets) -> Callable[[list[int]], float]:
    def f(subset: list[int]) -> float:
        z = dec.partial_sum(subset) + dec.residual
        return task_loss(teacher, dec.standardizer.invert(z), targets)
    return f


def train_loss_game(dec: FeatureDecomposition, teacher: Network, targets) -> CoalitionGame:
    """v(S) = E[L(residual)] - E[L(residual + sum_S c)] over the training set."""
    _check(dec, teacher, targets)
    loss = _loss_of(dec, teacher, targets)
    base = loss([])
    return CoalitionGame(len(dec.depths), lambda s: base - (base if not s else loss(s)),
                         "train")


def overfit_game(dec_train: FeatureDecomposition, dec_test: FeatureDecomposition | None,
                 teacher: Network, y_train, y_test) -> CoalitionGame:
    """w(S) = gap(residual + sum_S c) - gap(residual), gap = test loss - train loss."""
    if dec_test is None or y_test is None:
        raise MissingSplit("over-fitting attribution needs a test decomposition")
    _check(dec_train, teacher, y_train)
    _check(dec_test, teacher, y_test)
    if list(dec_train.depths) != list(dec_test.depths) or not (
            np.array_equal(dec_train.standardizer.mean, dec_test.standardizer.mean)
            and np.array_equal(dec_train.standardizer.std, dec_test.standardizer.std)):
        raise IncompatibleDecomposition("train/test decompositions come from different families")
    l_tr = _loss_of(dec_train, teacher, y_train)
    l_te = _loss_of(dec_test, teacher, y_test)
    base = l_te([]) - l_tr([])
    return CoalitionGame(len(dec_train.depths),
                         lambda s: 0.0 if not s else (l_te(s) - l_tr(s)) - base, "overfit")


# --- derived metrics -------------------------------------------------------

def effectiveness_alpha(phi_train: Sequence[float], var_components: Sequence[float]
                        ) -> tuple[list[float | None], dict[int, str]]:
    alphas, reasons = [], {}
    for i, (p, v) in enumerate(zip(phi_train, var_components)):
        if v > 0:
            alphas.append(float(p) / math.sqrt(v))
        else:
            alphas.append(None)
            reasons[i] = "component has zero variance"
    return alphas, reasons


def overfit_alpha(phi_overfit: Sequence[float], phi_train: Sequence[float],
                  eps: float) -> tuple[list[float | None], dict[int, str]]:
    alphas, reasons = [], {}
    for i, (po, pt) in enumerate(zip(phi_overfit, phi_train)):
        if pt == 0 or abs(pt) < eps:
            alphas.append(None)
            reasons[i] = f"|phi_train| = {abs(pt):.3g} below guard {eps:.3g}"
        else:
            alphas.append(float(po) / float(pt))
    return alphas, reasons


@dataclass
class AttributionReport:
    depths: list[int]
    phi_train: list[float]
    phi_overfit: list[float]
    alpha_effective: list[float | None]
    alpha_overfit: list[float | None]
    v_train_total: float
    v_overfit_total: float
    var_components: list[float]
    undefined: dict[str, dict[int, str]] = field(default_factory=dict)
    subset_table: list[tuple[int, float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["undefined"] = {k: {str(i): r for i, r in v.items()} for k, v in self.undefined.items()}
        d["subset_table"] = [list(row) for row in self.subset_table]
        return d

    def subset_csv(self) -> str:
        lines = ["subset_bitmask,v_train,v_overfit"]
        lines += [f"{m},{vt!r},{vo!r}" for m, vt, vo in self.subset_table]
        return "\n".join(lines) + "\n"


def attribute(dec_train: FeatureDecomposition, dec_test: FeatureDecomposition,
              teacher: Network, y_train, y_test, var_components: Sequence[float],
              guard: float = 1e-6, permutations: int | None = None,
              seed: int = 0) -> AttributionReport:
    """Run both games and derive the alpha metrics.

    Exact enumeration by default; ``permutations`` switches to sampling.
    """
    g_train = train_loss_game(dec_train, teacher, y_train)
    g_over = overfit_game(dec_train, dec_test, teacher, y_train, y_test)
    if permutations:
        phi_t = sampled_shapley(g_train, permutations, seed).phi
        phi_o = sampled_shapley(g_over, permutations, seed).phi
    else:
        phi_t = exact_shapley(g_train)
        phi_o = exact_shapley(g_over)
    full = (1 << g_train.n_players) - 1
    v_total = g_train.value(full)
    a_eff, r_eff = effectiveness_alpha(phi_t, var_components)
    a_over, r_over = overfit_alpha(phi_o, phi_t, guard * abs(v_total))
    table = [(m, g_train.cache[m], g_over.cache[m])
             for m in sorted(set(g_train.cache) & set(g_over.cache))]
    return AttributionReport(
        depths=list(dec_train.depths), phi_train=[float(p) for p in phi_t],
        phi_overfit=[float(p) for p in phi_o], alpha_effective=a_eff, alpha_overfit=a_over,
        v_train_total=v_total, v_overfit_total=g_over.value(full),
        var_components=[float(v) for v in var_components],
        undefined={"alpha_effective": r_eff, "alpha_overfit": r_over},
        subset_table=table)
