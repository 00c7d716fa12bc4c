"""Training the networks that get analysed."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fcx.core.tensor import Tensor, mse, softmax_cross_entropy
from fcx.disentangler import Standardizer, train_mimic
from fcx.pipeline.data import Dataset
from fcx.training import TrainConfig, fit
from fcx.zoo import Network, NetworkSpec, build_disentangler, build_teacher


@dataclass
class TeacherConfig:
    arch: str = "small-resnet"
    blocks: int = 1
    widths: tuple[int, ...] = (8, 8, 8)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=30, lr=3e-3))

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)


def train_classifier(ds: Dataset, cfg: TeacherConfig, seed: int = 0) -> Network:
    """Train a classifier teacher on ``ds`` and return it frozen."""
    classes = int(ds.y_train.max()) + 1 if ds.task == "classification" else None
    if classes is None:
        net = build_teacher(cfg.arch, cfg.blocks, ds.x_train.shape[1:], None,
                            ds.y_train.shape[1:], cfg.widths, seed)
    else:
        classes = max(classes, int(ds.spec.classes))
        net = build_teacher(cfg.arch, cfg.blocks, ds.x_train.shape[1:], classes,
                            None, cfg.widths, seed)
    params = net.trainable()
    x, y = ds.x_train, ds.y_train

    if net.spec.loss == "ce":
        def loss_fn(idx):
            return softmax_cross_entropy(net.apply(x[idx], params), y[idx])
    else:
        flat = y.reshape(len(y), -1)

        def loss_fn(idx):
            return mse(net.apply(x[idx], params), Tensor(flat[idx]))

    run_cfg = TrainConfig(**{**cfg.train.to_dict(), "seed": seed})
    curve = fit(params, loss_fn, len(x), run_cfg)
    net.set_params({k: v.data for k, v in params.items()})
    net.meta.update({"train_curve": [float(c) for c in curve], "n_train": int(len(x))})
    return net.freeze()


def train_target_net(ds: Dataset, m: int, widths, cfg: TrainConfig, seed: int = 0) -> Network:
    """Target net for a ``task_n`` dataset.

    A disentangler-shaped net trained by MSE to reproduce the (standardized)
    task-net output. Its output is the analysed feature, so the head is empty.
    """
    y_std = Standardizer.fit(ds.y_train)
    net = build_disentangler(m, 1.0, ds.x_train.shape[1:], ds.y_train.shape[1:], widths,
                             seed=seed, name=f"target-m{m}")
    run_cfg = TrainConfig(**{**cfg.to_dict(), "seed": seed})
    net, curve, init, final = train_mimic(net, ds.x_train, y_std.apply(ds.y_train), run_cfg)
    spec = NetworkSpec(net.spec.layers, net.spec.input_shape, tap=len(net.spec.layers),
                       loss="mse", name=net.spec.name)
    meta = dict(net.meta, init_loss=init, final_loss=final,
                target_mean=y_std.mean.ravel().tolist(), target_std=y_std.std.ravel().tolist())
    return Network(spec, net.params, seed=seed, frozen=True, meta=meta)


def accuracy(net: Network, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.argmax(net(x), axis=1) == y))
