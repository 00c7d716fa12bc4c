"""Full feature-complexity analysis of one frozen network."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fcx.attribution import AttributionReport, attribute, task_loss
from fcx.core.stats import variance_of
from fcx.disentangler import (
    ComponentStats,
    DisentanglerFamilySpec,
    DistillConfig,
    FeatureDecomposition,
    decompose,
    distill,
    significance,
)
from fcx.errors import ShapeMismatch
from fcx.pipeline.profile import ComplexityProfile, complexity_profile
from fcx.reliability import (
    build_reliability_stack,
    extract_split,
    train_phase_g,
    train_phase_h,
)
from fcx.training import TrainConfig
from fcx.utils import derive_seed
from fcx.zoo import DESK_BASE_WIDTHS, Network


@dataclass
class AnalysisConfig:
    depths: tuple[int, ...] = (4, 7)
    base_widths: tuple[int, ...] = DESK_BASE_WIDTHS
    distill: DistillConfig = field(default_factory=lambda: DistillConfig(epochs=60, lr=2e-3))
    stack: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=60, lr=2e-3))
    R: int = 10
    reliability: bool = True
    denominator: str = "disentangler"
    permutations: int | None = None
    guard: float = 1e-6

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.base_widths = tuple(int(b) for b in self.base_widths)
        if isinstance(self.distill, dict):
            self.distill = DistillConfig(**self.distill)
        if isinstance(self.stack, dict):
            self.stack = TrainConfig(**self.stack)

    def family(self) -> DisentanglerFamilySpec:
        return DisentanglerFamilySpec.from_depths(self.depths, base_widths=self.base_widths)


@dataclass
class ModelAnalysis:
    name: str
    dec_train: FeatureDecomposition
    dec_test: FeatureDecomposition
    stats: ComponentStats
    attribution: AttributionReport
    rho_reli: dict[int, float] = field(default_factory=dict)
    profile: ComplexityProfile | None = None

    def rows(self) -> list[dict]:
        a = self.attribution
        return [{"depth": d, "component": self.name, "rho_c": self.stats.rho[i],
                 "rho_reli": self.rho_reli.get(d), "phi_train": a.phi_train[i],
                 "phi_overfit": a.phi_overfit[i], "alpha_eff": a.alpha_effective[i],
                 "alpha_overfit": a.alpha_overfit[i]} for i, d in enumerate(self.stats.depths)]

    def summary(self) -> dict:
        return {"name": self.name, "depths": self.stats.depths, "rho_c": self.stats.rho,
                "residual_share": self.stats.residual_share,
                "rho_reli": {str(k): v for k, v in self.rho_reli.items()},
                "attribution": self.attribution.to_dict(),
                "profile": self.profile.to_dict() if self.profile else None}


def analyse_model(name: str, teacher: Network, x_train, y_train, x_test, y_test,
                  cfg: AnalysisConfig, exemplars: list[Network] = (), seed: int = 0,
                  dataset_id: str = "") -> ModelAnalysis:
    """Decompose, attribute and (with exemplars) split ``teacher``'s feature."""
    dcfg = DistillConfig(**{**cfg.distill.to_dict(), "seed": derive_seed(seed, "distill")})
    fam = distill(teacher, cfg.family(), x_train, dcfg)
    dec_tr = decompose(fam, teacher.feature(x_train), x_train, dataset_id + ":train")
    dec_te = decompose(fam, teacher.feature(x_test), x_test, dataset_id + ":test")
    stats = significance(dec_tr)
    report = attribute(dec_tr, dec_te, teacher, y_train, y_test, stats.var_components,
                       guard=cfg.guard, permutations=cfg.permutations,
                       seed=derive_seed(seed, "shapley"))
    out = ModelAnalysis(name, dec_tr, dec_te, stats, report)
    if cfg.reliability and exemplars:
        feats = [teacher.feature(x_train)] + [e.feature(x_train) for e in exemplars]
        splits = {}
        for i, d in enumerate(fam.depths):
            stack = build_reliability_stack(d, [f.shape[1:] for f in feats], x_train.shape[1:],
                                            R=cfg.R, base_widths=cfg.base_widths,
                                            seed=derive_seed(seed, "stack", d))
            scfg = TrainConfig(**{**cfg.stack.to_dict(), "seed": derive_seed(seed, "phase-g", d)})
            train_phase_g(stack, feats, x_train, scfg, standardize=cfg.distill.standardize)
            train_phase_h(stack, x_train)
            split = extract_split(stack, 0, dec_tr.phi[i], x_train, d, cfg.denominator)
            out.rho_reli[d] = split.rho
            splits[d] = (split.reliable, split.unreliable)
        out.profile = complexity_profile(splits, fam.depths, variance_of(dec_tr.feature))
    return out


def feature_substitution_eval(teacher: Network, x, y, substitute) -> dict:
    """Head metric with the teacher's own feature vs a substituted feature.

    ``substitute`` is a raw-space feature array for ``x`` or a callable mapping
    ``x`` to one. Classification heads report accuracy, regression heads the
    negative task loss, so larger is better in both cases.
    """
    f = teacher.feature(x)
    sub = np.asarray(substitute(x) if callable(substitute) else substitute, dtype=np.float64)
    if sub.shape != f.shape:
        raise ShapeMismatch(f"substitute {sub.shape} vs feature {f.shape}")

    def metric(feat):
        if teacher.spec.loss == "ce":
            return float(np.mean(np.argmax(teacher.head(feat), axis=1) == y))
        return -task_loss(teacher, feat, y)

    acc_f = metric(f)
    acc_phi = metric(sub)
    return {"metric": "accuracy" if teacher.spec.loss == "ce" else "neg_loss",
            "acc_f": acc_f, "acc_phi": acc_phi, "delta": acc_phi - acc_f}
