"""Pruned+quantized and distilled variants of a teacher."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fcx.core.tensor import Tensor, mse, softmax_cross_entropy
from fcx.disentangler import DistillConfig, Standardizer, train_mimic
from fcx.errors import InvalidFraction, ValidationError
from fcx.training import TrainConfig, fit
from fcx.utils import derive_seed
from fcx.zoo import DESK_BASE_WIDTHS, Network, build_disentangler, compose, depth_to_m


@dataclass
class CompressionReport:
    prune_fraction: float
    num_weights: int
    zeroed: int
    bits: dict[str, int]
    distinct: dict[str, int]
    retrained: bool
    curve: list[float] = field(default_factory=list)

    @property
    def zeroed_fraction(self) -> float:
        return self.zeroed / self.num_weights

    def to_dict(self) -> dict:
        return {"prune_fraction": self.prune_fraction, "num_weights": self.num_weights,
                "zeroed": self.zeroed, "zeroed_fraction": self.zeroed_fraction,
                "bits": self.bits, "distinct": self.distinct, "retrained": self.retrained}


def _weight_layers(net: Network) -> dict[str, str]:
    """Weight tensor name -> ``conv`` or ``fc``."""
    out = {}
    for i, layer in enumerate(net.spec.layers):
        if layer["kind"] in ("conv", "res"):
            out[f"{i}.weight"] = "conv"
        elif layer["kind"] == "affine":
            out[f"{i}.weight"] = "fc"
    return out


def prune_masks(params: dict[str, np.ndarray], names, fraction: float) -> dict[str, np.ndarray]:
    """Global magnitude masks zeroing exactly ``round(fraction * total)`` weights."""
    flat = np.concatenate([np.abs(params[n]).ravel() for n in names])
    k = int(round(fraction * flat.size))
    keep = np.ones(flat.size, dtype=bool)
    keep[np.argsort(flat, kind="stable")[:k]] = False
    masks, pos = {}, 0
    for n in names:
        size = params[n].size
        masks[n] = keep[pos:pos + size].reshape(params[n].shape)
        pos += size
    return masks


def quantize(w: np.ndarray, bits: int) -> np.ndarray:
    """Symmetric uniform quantizer with ``2**bits - 1`` levels around zero."""
    top = float(np.max(np.abs(w)))
    if top == 0:
        return np.zeros_like(w)
    half = 2 ** (bits - 1) - 1
    step = top / half
    return np.clip(np.round(w / step), -half, half) * step


def compress_model(teacher: Network, prune_fraction: float, conv_bits: int = 8,
                   fc_bits: int = 5, retrain: TrainConfig | None = None,
                   x: np.ndarray | None = None, y: np.ndarray | None = None
                   ) -> tuple[Network, CompressionReport]:
    """Prune globally by magnitude, retrain survivors, then quantize per layer.

    Retraining runs only when a config and training data are given and the
    prune fraction is positive.
    """
    if not 0 <= prune_fraction < 1:
        raise InvalidFraction(f"prune fraction must lie in [0, 1), got {prune_fraction}")
    for b in (conv_bits, fc_bits):
        if not 2 <= b <= 16:
            raise ValidationError(f"bits must lie in [2, 16], got {b}")
    net = teacher.copy(frozen=False)
    kinds = _weight_layers(net)
    names = list(kinds)
    masks = prune_masks(net.params, names, prune_fraction)
    net.set_params({n: net.params[n] * masks[n] for n in names})

    curve: list[float] = []
    retrained = bool(retrain is not None and x is not None and y is not None
                     and prune_fraction > 0)
    if retrained:
        params = net.trainable()

        def reapply():
            for n in names:
                params[n].data *= masks[n]

        if net.spec.loss == "ce":
            def loss_fn(idx):
                return softmax_cross_entropy(net.apply(x[idx], params), y[idx])
        else:
            flat = y.reshape(len(y), -1)

            def loss_fn(idx):
                return mse(net.apply(x[idx], params), Tensor(flat[idx]))

        curve = fit(params, loss_fn, len(x), retrain, after_step=reapply)
        net.set_params({k: v.data for k, v in params.items()})

    bits = {"conv": int(conv_bits), "fc": int(fc_bits)}
    net.set_params({n: quantize(net.params[n], bits[kinds[n]]) for n in names})
    zeroed = int(sum(np.count_nonzero(net.params[n] == 0) for n in names))
    # the quantizer can only round small survivors down to zero, never revive
    zeroed_pruned = int(sum(np.count_nonzero(~masks[n]) for n in names))
    report = CompressionReport(
        prune_fraction=float(prune_fraction),
        num_weights=int(sum(net.params[n].size for n in names)),
        zeroed=zeroed_pruned, bits=bits,
        distinct={n: int(len(np.unique(net.params[n]))) for n in names},
        retrained=retrained, curve=[float(c) for c in curve])
    net.meta.update({"compression": report.to_dict(), "zero_after_quantization": zeroed})
    return net.freeze(), report


def fold_standardizer(net: Network, std: Standardizer) -> Network:
    """Fold ``z * std + mean`` into the last conv so the net emits raw features."""
    last = max(i for i, l in enumerate(net.spec.layers) if l["kind"] in ("conv", "res"))
    if net.spec.layers[last]["kind"] != "conv" or last != len(net.spec.layers) - 1:
        raise ValidationError("standardizer folding needs a trailing conv layer")
    s = std.std.reshape(-1)
    m = std.mean.reshape(-1)
    params = dict(net.params)
    params[f"{last}.weight"] = net.params[f"{last}.weight"] * s[:, None, None, None]
    params[f"{last}.bias"] = net.params[f"{last}.bias"] * s + m
    return Network(net.spec, params, seed=net.seed, meta=dict(net.meta))


def distill_model(teacher: Network, depth: int, x: np.ndarray, cfg: DistillConfig,
                  base_widths=DESK_BASE_WIDTHS, seed: int = 0) -> Network:
    """Student disentangler of ReLU depth ``depth`` glued to the frozen teacher head."""
    f = teacher.feature(x)
    std = Standardizer.fit(f, cfg.standardize)
    student = build_disentangler(depth_to_m(depth), 1.0, x.shape[1:], f.shape[1:],
                                 base_widths, seed=derive_seed(seed, "student", depth))
    run_cfg = TrainConfig(**{k: v for k, v in cfg.to_dict().items() if k != "standardize"})
    student, curve, init, final = train_mimic(student, x, std.apply(f), run_cfg)
    student = fold_standardizer(student, std)
    out = compose(student, teacher, name=f"distilled-l{depth}")
    out.meta.update({"student_depth": int(depth), "init_loss": init, "final_loss": final,
                     "curve": [float(c) for c in curve]})
    return out.freeze()
