"""Synthetic desk-scale datasets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from fcx.errors import ValidationError
from fcx.utils import config_hash, derive_seed
from fcx.zoo import build_task_net


@dataclass
class DatasetSpec:
    """``kind`` is ``task_n``, ``blobs`` or ``rings``."""

    kind: str = "task_n"
    n: int = 0
    task_seed: int = 0
    classes: int = 4
    spread: float = 1.0
    n_train: int = 256
    n_test: int = 128
    input_shape: tuple[int, ...] = (1, 16, 16)
    output_shape: tuple[int, ...] = (8, 4, 4)
    seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.output_shape = tuple(int(s) for s in self.output_shape)
        if self.kind not in ("task_n", "blobs", "rings"):
            raise ValidationError(f"unknown dataset kind {self.kind!r}")
        if self.n_train < 1 or self.n_test < 1:
            raise ValidationError("n_train and n_test must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["output_shape"] = list(self.output_shape)
        return d

    @property
    def id(self) -> str:
        return config_hash(self.to_dict())[:16]


@dataclass
class Dataset:
    spec: DatasetSpec
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    task: str = field(default="regression")

    @property
    def id(self) -> str:
        return self.spec.id

    def save(self, path) -> None:
        np.savez(path, x_train=self.x_train, y_train=self.y_train, x_test=self.x_test,
                 y_test=self.y_test)


def _balanced_labels(rng, n: int, classes: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % classes)


def gen_dataset(spec: DatasetSpec) -> Dataset:
    rng = np.random.default_rng(derive_seed(spec.seed, "data", spec.kind))
    total = spec.n_train + spec.n_test
    shape = spec.input_shape
    if spec.kind == "task_n":
        x = rng.normal(size=(total,) + shape)
        net = build_task_net(spec.n, derive_seed(spec.task_seed, "task-net"), shape,
                             spec.output_shape)
        y = net(x)
        task = "regression"
    elif spec.kind == "blobs":
        protos = np.random.default_rng(derive_seed(spec.task_seed, "protos")) \
            .normal(size=(spec.classes,) + shape)
        y_tr = _balanced_labels(rng, spec.n_train, spec.classes)
        y_te = _balanced_labels(rng, spec.n_test, spec.classes)
        y = np.concatenate([y_tr, y_te])
        x = protos[y] + spec.spread * rng.normal(size=(total,) + shape)
        task = "classification"
    else:
        c, h, w = shape
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        y_tr = _balanced_labels(rng, spec.n_train, spec.classes)
        y_te = _balanced_labels(rng, spec.n_test, spec.classes)
        y = np.concatenate([y_tr, y_te])
        radii = 1.5 + (min(h, w) / 2 - 2.0) * (y + 0.5) / spec.classes
        cy = h / 2 - 0.5 + rng.uniform(-1, 1, total)
        cx = w / 2 - 0.5 + rng.uniform(-1, 1, total)
        dist = np.sqrt((yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2)
        ring = np.exp(-((dist - radii[:, None, None]) ** 2) / 0.5)
        x = np.repeat(ring[:, None], c, axis=1) + spec.spread * 0.3 * rng.normal(size=(total,) + shape)
        task = "classification"
    return Dataset(spec, x[:spec.n_train], y[:spec.n_train], x[spec.n_train:],
                   y[spec.n_train:], task)


def load_dataset(path, spec: DatasetSpec | None = None) -> Dataset:
    with np.load(path) as z:
        arrays = {k: z[k] for k in ("x_train", "y_train", "x_test", "y_test")}
    task = "classification" if arrays["y_train"].ndim == 1 else "regression"
    return Dataset(spec or DatasetSpec(), task=task, **arrays)
