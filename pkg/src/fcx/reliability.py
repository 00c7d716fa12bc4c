"""Reliable / unreliable split of a feature shared across K networks.

A shared backbone ``psi`` (a disentangler of ReLU depth ``l``) feeds K
linear 1x1-conv heads ``g_k``, one per network. Phase g trains backbone and
heads to mimic every network's feature; phase h then trains linear inverses
``h_k`` with the iterated cycle loss while ``psi`` and ``g`` stay fixed.
``g_k(psi(x))`` is the reliable part of network k's feature.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from fcx.core.stats import dyadic_grid, snap, variance_of
from fcx.core.tensor import Tensor, mse
from fcx.disentangler import Standardizer
from fcx.errors import (
    DegenerateFeature,
    DepthMismatch,
    PhaseOrderError,
    ShapeMismatch,
    TooFewNetworks,
    ValidationError,
)
from fcx.training import TrainConfig, fit
from fcx.utils import derive_seed
from fcx.zoo import DESK_BASE_WIDTHS, Network, NetworkSpec, build_disentangler, conv, depth_to_m


def linear_map(cin: int, cout: int, spatial: tuple[int, int], seed: int) -> Network:
    spec = NetworkSpec((conv(cout, 1, 1, 0),), (cin,) + tuple(spatial), loss="mse",
                       name=f"linear-{cin}-{cout}")
    return Network.create(spec, seed=seed)


def param_checksum(nets: Sequence[Network]) -> str:
    h = hashlib.sha256()
    for net in nets:
        for k in sorted(net.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(net.params[k]).tobytes())
    return h.hexdigest()


@dataclass
class ReliabilityStack:
    depth: int
    backbone: Network
    heads: list[Network]
    inverses: list[Network]
    R: int = 10
    phase: str = "init"
    standardizers: list[Standardizer] | None = None
    history: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.heads)

    def psi(self, x: np.ndarray) -> np.ndarray:
        return self.backbone(x)

    def reliable(self, x: np.ndarray, k: int) -> np.ndarray:
        return self.heads[k](self.psi(x))

    def cycle(self, psi: np.ndarray) -> np.ndarray:
        """One reconstruction step: mean over k of ``h_k(g_k(psi))``."""
        return np.mean([h(g(psi)) for g, h in zip(self.heads, self.inverses)], axis=0)


def build_reliability_stack(l: int, tap_shapes: Sequence[tuple[int, ...]],
                            in_shape: tuple[int, ...], R: int = 10, r: float = 1.0,
                            base_widths: Sequence[int] = DESK_BASE_WIDTHS,
                            psi_channels: int | None = None, seed: int = 0) -> ReliabilityStack:
    K = len(tap_shapes)
    if K < 2:
        raise TooFewNetworks(f"reliability needs K >= 2 networks, got {K}")
    spatial = {tuple(s[1:]) for s in tap_shapes}
    if len(spatial) != 1:
        raise ShapeMismatch(f"tap features disagree spatially: {sorted(spatial)}")
    (hw,) = spatial
    c_psi = psi_channels or max(s[0] for s in tap_shapes)
    backbone = build_disentangler(depth_to_m(l), r, in_shape, (c_psi,) + hw, base_widths,
                                  seed=derive_seed(seed, "psi", l))
    heads = [linear_map(c_psi, s[0], hw, derive_seed(seed, "g", k))
             for k, s in enumerate(tap_shapes)]
    inverses = [linear_map(s[0], c_psi, hw, derive_seed(seed, "h", k))
                for k, s in enumerate(tap_shapes)]
    return ReliabilityStack(l, backbone, heads, inverses, R=R)


def _sq(a: np.ndarray, b: np.ndarray) -> float:
    d = (a - b).reshape(len(a), -1)
    return float(np.mean(np.sum(d * d, axis=1)))


def distill_loss(stack: ReliabilityStack, x: np.ndarray, targets: Sequence[np.ndarray]) -> float:
    """sum_k E_x ||target_k - g_k(psi(x))||^2."""
    psi = stack.psi(x)
    return sum(_sq(t, g(psi)) for t, g in zip(targets, stack.heads))


def train_phase_g(stack: ReliabilityStack, features: Sequence[np.ndarray], x: np.ndarray,
                  cfg: TrainConfig, standardize: bool = True) -> ReliabilityStack:
    """Train backbone and heads on the K target features (raw teacher space)."""
    if len(features) != stack.K:
        raise ShapeMismatch(f"expected {stack.K} target features, got {len(features)}")
    stds = [Standardizer.fit(f, standardize) for f in features]
    targets = [s.apply(f) for s, f in zip(stds, features)]
    for t, g in zip(targets, stack.heads):
        if tuple(t.shape[1:]) != tuple(g.spec.output_shape):
            raise ShapeMismatch(f"target {t.shape[1:]} vs head {g.spec.output_shape}")
    init = distill_loss(stack, x, targets)
    bp = stack.backbone.trainable()
    hp = [g.trainable() for g in stack.heads]
    allp = dict(bp)
    for k, p in enumerate(hp):
        allp.update({f"g{k}/{n}": t for n, t in p.items()})

    def loss_fn(idx):
        psi = stack.backbone.apply(x[idx], bp)
        total = None
        for k, g in enumerate(stack.heads):
            term = mse(g.apply(psi, hp[k]), Tensor(targets[k][idx]))
            total = term if total is None else total + term
        return total

    curve = fit(allp, loss_fn, len(x), cfg)
    stack.backbone.set_params({n: t.data for n, t in bp.items()})
    for g, p in zip(stack.heads, hp):
        g.set_params({n: t.data for n, t in p.items()})
    stack.standardizers = stds
    stack.phase = "g"
    stack.history["phase_g"] = {"curve": curve, "init_loss": init,
                                "final_loss": distill_loss(stack, x, targets),
                                "target_variance": sum(variance_of(t) for t in targets)}
    return stack


def cycle_terms(stack: ReliabilityStack, psi: np.ndarray) -> float:
    """sum_k E_x ||h_k(g_k(psi)) - psi||^2."""
    return sum(_sq(h(g(psi)), psi) for g, h in zip(stack.heads, stack.inverses))


def _lstsq_inverse(h: Network, u: np.ndarray, target: np.ndarray) -> None:
    """Exact minimiser of ||h(u) - target||^2 for a 1x1-conv ``h``."""
    cin, cout = u.shape[1], target.shape[1]
    a = np.moveaxis(u, 1, -1).reshape(-1, cin)
    a = np.concatenate([a, np.ones((len(a), 1))], axis=1)
    t = np.moveaxis(target, 1, -1).reshape(-1, cout)
    w, *_ = np.linalg.lstsq(a, t, rcond=None)
    h.set_params({"0.weight": w[:-1].T.reshape(cout, cin, 1, 1), "0.bias": w[-1].copy()})


def _fit_inverses_gd(stack: ReliabilityStack, inputs, target, cfg: TrainConfig, r: int) -> None:
    hp = [h.trainable() for h in stack.inverses]
    allp = {f"h{k}/{n}": t for k, p in enumerate(hp) for n, t in p.items()}

    def loss_fn(idx):
        tgt = Tensor(target[idx])
        total = None
        for k, h in enumerate(stack.inverses):
            term = mse(h.apply(inputs[k][idx], hp[k]), tgt)
            total = term if total is None else total + term
        return total

    run_cfg = TrainConfig(**{**cfg.to_dict(), "seed": derive_seed(cfg.seed, "cycle", r)})
    fit(allp, loss_fn, len(target), run_cfg)
    for h, p in zip(stack.inverses, hp):
        h.set_params({n: t.data for n, t in p.items()})


def train_phase_h(stack: ReliabilityStack, x: np.ndarray, cfg: TrainConfig | None = None,
                  solver: str = "lstsq") -> ReliabilityStack:
    """Fit the inverses for r = 1..R, recomputing psi_r = mean_k h_k g_k psi_{r-1}.

    Each per-r objective is linear least squares in the inverses, so the
    default solver computes it in closed form. ``solver="gd"`` trains them
    with the optimiser in ``cfg`` instead. Parameters that would raise a
    phase's loss above its starting value are rolled back.
    """
    if stack.phase not in ("g", "h"):
        raise PhaseOrderError("phase h requires a completed phase g")
    if solver not in ("lstsq", "gd"):
        raise ValidationError(f"unknown solver {solver!r}")
    cfg = cfg or TrainConfig()
    frozen_sum = param_checksum([stack.backbone, *stack.heads])
    psi = stack.psi(x)
    per_r = []
    for r in range(1, stack.R + 1):
        inputs = [g(psi) for g in stack.heads]
        before = cycle_terms(stack, psi)
        saved = [dict(h.params) for h in stack.inverses]
        if solver == "lstsq":
            for h, u in zip(stack.inverses, inputs):
                _lstsq_inverse(h, u, psi)
        else:
            _fit_inverses_gd(stack, inputs, psi, cfg, r)
        after = cycle_terms(stack, psi)
        if after > before:
            for h, p in zip(stack.inverses, saved):
                h.set_params(p)
            after = before
        per_r.append({"r": r, "before": before, "after": after,
                      "psi_variance": variance_of(psi)})
        psi = stack.cycle(psi)
    if param_checksum([stack.backbone, *stack.heads]) != frozen_sum:
        raise PhaseOrderError("phase h mutated backbone or head parameters")
    stack.phase = "h"
    stack.history["phase_h"] = {"per_r": per_r, "summed_objective": summed_cycle_loss(stack, x)}
    return stack


def summed_cycle_loss(stack: ReliabilityStack, x: np.ndarray) -> float:
    """The full sum over r of the cycle terms at the current inverses."""
    psi = stack.psi(x)
    total = 0.0
    for _ in range(stack.R):
        total += cycle_terms(stack, psi)
        psi = stack.cycle(psi)
    return total


@dataclass
class ReliabilitySplit:
    k: int
    depth: int
    reliable: np.ndarray
    unreliable: np.ndarray
    phi: np.ndarray
    denominator: np.ndarray

    @property
    def rho(self) -> float:
        return reliability_rho(self)


def extract_split(stack: ReliabilityStack, k: int, phi_k: np.ndarray, x: np.ndarray,
                  depth: int, denominator: str = "disentangler") -> ReliabilitySplit:
    """Split network k's depth-``depth`` disentangler output ``phi_k``.

    ``phi_k`` lives in network k's standardized feature space, the same space
    the stack's heads were trained in. ``denominator`` selects what the
    reliability ratio is normalised by: the disentangler output (default) or
    the stack's own R-step reconstruction ``g_k(psi_R(x))``.
    """
    if depth != stack.depth:
        raise DepthMismatch(f"stack depth {stack.depth} vs decomposition depth {depth}")
    if stack.phase == "init":
        raise PhaseOrderError("stack has not been trained")
    reli = stack.reliable(x, k)
    if reli.shape != phi_k.shape:
        raise ShapeMismatch(f"reliable part {reli.shape} vs phi {phi_k.shape}")
    q = dyadic_grid(reli, phi_k)
    reli = snap(reli, q)
    phi = snap(phi_k, q)
    unreli = phi - reli
    if denominator == "disentangler":
        denom = phi
    elif denominator == "reconstruction":
        psi = stack.psi(x)
        for _ in range(stack.R):
            psi = stack.cycle(psi)
        denom = stack.heads[k](psi)
    else:
        raise ValidationError(f"unknown denominator {denominator!r}")
    return ReliabilitySplit(k, depth, reli, unreli, phi, denom)


def reliability_rho(split: ReliabilitySplit) -> float:
    var_phi = variance_of(split.denominator)
    if var_phi <= 0:
        raise DegenerateFeature("feature has zero variance")
    return variance_of(split.reliable) / var_phi
