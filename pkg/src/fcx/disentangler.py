"""Depth-indexed distillation and telescoped feature components.

A family of disentangler nets of increasing ReLU depth is trained to mimic
one teacher feature. Differences between consecutive depths give
complexity-ordered components; the leftover is the high-order residual.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from fcx import container
from fcx.core.stats import dyadic_grid, snap, variance_of
from fcx.core.tensor import Tensor, mse
from fcx.errors import (
    CorruptCheckpoint,
    DegenerateFeature,
    EmptyInput,
    ShapeMismatch,
    ValidationError,
)
from fcx.training import TrainConfig, fit
from fcx.utils import derive_seed, worker_count
from fcx.zoo import DESK_BASE_WIDTHS, Network, build_disentangler, depth_to_m


@dataclass
class DistillConfig(TrainConfig):
    standardize: bool = True


@dataclass
class DisentanglerFamilySpec:
    m_values: tuple[int, ...] = (1, 2, 4)
    r: float = 1.0
    base_widths: tuple[int, ...] = DESK_BASE_WIDTHS

    def __post_init__(self):
        self.m_values = tuple(int(m) for m in self.m_values)
        self.base_widths = tuple(int(b) for b in self.base_widths)
        depths = self.depths
        if any(b <= a for a, b in zip(depths, depths[1:])):
            raise ValidationError(f"depths must be strictly ascending, got {depths}")

    @property
    def depths(self) -> list[int]:
        return [3 * m + 1 for m in self.m_values]

    @classmethod
    def from_depths(cls, depths: Sequence[int], **kw) -> "DisentanglerFamilySpec":
        return cls(m_values=tuple(depth_to_m(d) for d in depths), **kw)


@dataclass
class Standardizer:
    """Fixed per-channel affine map ``z = (f - mean) / std``."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray, enabled: bool = True) -> "Standardizer":
        shape = features.shape[1:]
        cshape = (shape[0],) + (1,) * (len(shape) - 1)
        if not enabled:
            return cls(np.zeros(cshape), np.ones(cshape))
        axes = (0,) + tuple(range(2, features.ndim))
        mean = features.mean(axis=axes).reshape(cshape)
        std = features.std(axis=axes).reshape(cshape)
        std = np.where(std > 1e-12, std, 1.0)
        return cls(mean, std)

    def apply(self, f: np.ndarray) -> np.ndarray:
        return (f - self.mean) / self.std

    def invert(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean


@dataclass
class DisentanglerFamily:
    depths: list[int]
    nets: list[Network]
    standardizer: Standardizer
    curves: list[list[float]]
    init_loss: list[float]
    final_loss: list[float]
    feature_shape: tuple[int, ...]


@dataclass
class FeatureDecomposition:
    depths: list[int]
    phi: np.ndarray          # (L, n, *feature)
    components: np.ndarray   # (L, n, *feature)
    residual: np.ndarray     # (n, *feature)
    feature: np.ndarray      # (n, *feature), standardized space
    standardizer: Standardizer
    dataset_id: str = ""

    @property
    def n_samples(self) -> int:
        return self.feature.shape[0]

    def partial_sum(self, subset: Sequence[int]) -> np.ndarray:
        """Left-to-right sum of the selected components (zeros if empty)."""
        out = np.zeros_like(self.residual)
        for i in sorted(subset):
            out = out + self.components[i]
        return out

    def telescoped(self) -> np.ndarray:
        return self.partial_sum(range(len(self.depths))) + self.residual


@dataclass
class ComponentStats:
    depths: list[int]
    var_components: list[float]
    rho: list[float]
    var_feature: float
    var_residual: float
    residual_share: float = field(init=False)

    def __post_init__(self):
        self.residual_share = self.var_residual / self.var_feature


def _normalized_loss(net: Network, x: np.ndarray, z: np.ndarray) -> float:
    out = net.feature(x) if net.spec.tap is not None else net(x)
    return float(np.mean((out - z) ** 2))


def train_mimic(net: Network, x: np.ndarray, target: np.ndarray,
                cfg: TrainConfig) -> tuple[Network, list[float], float, float]:
    """Train ``net`` (whole forward) to mimic ``target`` by element-mean MSE."""
    if tuple(net.spec.output_shape) != tuple(target.shape[1:]):
        raise ShapeMismatch(f"net output {net.spec.output_shape} vs target {target.shape[1:]}")
    init = _normalized_loss(net, x, target)
    params = net.trainable()

    def loss_fn(idx):
        return mse(net.apply(x[idx], params), Tensor(target[idx]))

    curve = fit(params, loss_fn, len(x), cfg)
    net.set_params({k: v.data for k, v in params.items()})
    final = _normalized_loss(net, x, target)
    return net, curve, init, final


def distill_features(features: np.ndarray, x: np.ndarray, family: DisentanglerFamilySpec,
                     cfg: DistillConfig | None = None) -> DisentanglerFamily:
    """Train one disentangler per depth on fixed target ``features``."""
    cfg = cfg or DistillConfig()
    if len(x) == 0:
        raise EmptyInput("empty dataset")
    if len(features) != len(x):
        raise ShapeMismatch("one target feature per input sample required")
    std = Standardizer.fit(features, cfg.standardize)
    z = std.apply(features)

    def one(m: int):
        net = build_disentangler(m, family.r, x.shape[1:], features.shape[1:],
                                 family.base_widths, seed=derive_seed(cfg.seed, "phi", m))
        run_cfg = DistillConfig(**{**asdict(cfg), "seed": derive_seed(cfg.seed, "batches", m)})
        return train_mimic(net, x, z, run_cfg)

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, family.m_values))
    else:
        results = [one(m) for m in family.m_values]
    return DisentanglerFamily(
        depths=family.depths,
        nets=[r[0].freeze() for r in results],
        standardizer=std,
        curves=[r[1] for r in results],
        init_loss=[r[2] for r in results],
        final_loss=[r[3] for r in results],
        feature_shape=tuple(features.shape[1:]),
    )


def distill(teacher: Network, family: DisentanglerFamilySpec, x: np.ndarray,
            cfg: DistillConfig | None = None) -> DisentanglerFamily:
    if not teacher.frozen:
        raise ValidationError("distillation requires a frozen teacher")
    return distill_features(teacher.feature(x), x, family, cfg)


def decompose(family: DisentanglerFamily, features: np.ndarray, x: np.ndarray,
              dataset_id: str = "") -> FeatureDecomposition:
    """Telescope a trained family on ``x`` against teacher ``features`` (raw)."""
    if tuple(features.shape[1:]) != tuple(family.feature_shape):
        raise ShapeMismatch(f"feature {features.shape[1:]} vs family {family.feature_shape}")
    z = family.standardizer.apply(features)
    phi = np.stack([net(x) for net in family.nets])
    return build_decomposition(list(family.depths), phi, z, family.standardizer, dataset_id)


def build_decomposition(depths: Sequence[int], phi: np.ndarray, feature: np.ndarray,
                        standardizer: Standardizer | None = None,
                        dataset_id: str = "") -> FeatureDecomposition:
    """Telescope stacked disentangler outputs ``phi`` against ``feature``.

    Inputs are first snapped to a shared power-of-two grid, which makes every
    sum and difference below exact: ``sum(components) + residual == feature``
    holds bit for bit in any summation order.
    """
    if phi.shape[1:] != feature.shape:
        raise ShapeMismatch(f"phi {phi.shape[1:]} vs feature {feature.shape}")
    q = dyadic_grid(phi, feature)
    phi = snap(phi, q)
    z = snap(feature, q)
    comps = np.empty_like(phi)
    comps[0] = phi[0]
    for i in range(1, len(phi)):
        comps[i] = phi[i] - phi[i - 1]
    residual = z - phi[-1]
    if standardizer is None:
        standardizer = Standardizer.fit(z, enabled=False)
    return FeatureDecomposition(list(depths), phi, comps, residual, z, standardizer,
                                dataset_id)


def significance(dec: FeatureDecomposition) -> ComponentStats:
    if dec.n_samples < 2:
        raise EmptyInput("significance needs at least two samples")
    var_f = variance_of(dec.feature)
    if var_f <= 0:
        raise DegenerateFeature("teacher feature has zero variance")
    var_c = [variance_of(c) for c in dec.components]
    return ComponentStats(list(dec.depths), var_c, [v / var_f for v in var_c], var_f,
                          variance_of(dec.residual))


def residual_curve(dec: FeatureDecomposition) -> list[tuple[int, float]]:
    """(depth, E||z - Phi||^2 / Var[z]) for every depth of a decomposition."""
    var_f = variance_of(dec.feature)
    n = dec.n_samples
    out = []
    for d, phi in zip(dec.depths, dec.phi):
        err = (dec.feature - phi).reshape(n, -1)
        out.append((d, float(np.mean(np.sum(err * err, axis=1)) / var_f)))
    return out


def weighted_complexity_order(stats: ComponentStats) -> float:
    total = sum(stats.rho)
    return sum(d * r for d, r in zip(stats.depths, stats.rho)) / total


# --- export ---------------------------------------------------------------

def _single(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def export_decomposition(dec: FeatureDecomposition, path):
    """Write ``dec`` in single precision.

    Phi and the feature are rounded first and the components re-telescoped from
    the rounded values, so load -> export reproduces the same bytes.
    """
    dec = build_decomposition(dec.depths, _single(dec.phi), _single(dec.feature),
                              dec.standardizer, dec.dataset_id)
    arrays = {"feature": dec.feature, "residual": dec.residual,
              "standardizer.mean": dec.standardizer.mean,
              "standardizer.std": dec.standardizer.std}
    for i, d in enumerate(dec.depths):
        arrays[f"phi.{i:02d}"] = dec.phi[i]
        arrays[f"component.{i:02d}"] = dec.components[i]
    meta = {"kind": "decomposition", "depths": list(dec.depths), "dataset_id": dec.dataset_id}
    return container.write(path, meta, arrays)


def load_decomposition(path) -> FeatureDecomposition:
    """Load an exported decomposition (single precision, re-telescoped)."""
    header, arrays = container.read(path)
    if header.get("kind") != "decomposition":
        raise CorruptCheckpoint(f"not a decomposition: kind={header.get('kind')!r}")
    L = len(header["depths"])
    phi = np.stack([arrays[f"phi.{i:02d}"] for i in range(L)])
    std = Standardizer(arrays["standardizer.mean"], arrays["standardizer.std"])
    return build_decomposition(header["depths"], phi, arrays["feature"], std,
                               header.get("dataset_id", ""))
