"""Desk-scale experiment runners (exp1 to exp6)."""

from __future__ import annotations

import itertools
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from fcx.attribution import task_loss
from fcx.disentangler import (
    DisentanglerFamilySpec,
    DistillConfig,
    decompose,
    distill_features,
    residual_curve,
    significance,
    weighted_complexity_order,
)
from fcx.errors import ValidationError
from fcx.pipeline.analysis import AnalysisConfig, analyse_model, feature_substitution_eval
from fcx.pipeline.compress import compress_model, distill_model
from fcx.pipeline.data import DatasetSpec, gen_dataset
from fcx.pipeline.profile import cross_validate, pca2d
from fcx.pipeline.report import RunRecord, emit_report, existing_record, run_dir
from fcx.pipeline.teacher import TeacherConfig, accuracy, train_classifier, train_target_net
from fcx.reliability import build_reliability_stack, extract_split, train_phase_g, train_phase_h
from fcx.training import TrainConfig
from fcx.utils import derive_seed
from fcx.zoo import build_task_net


def _from_dict(cls, d: dict | None):
    """Build a (possibly nested) config dataclass from a plain dict."""
    if d is None:
        return cls()
    if is_dataclass(d):
        return d
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def _tuple(v):
    return tuple(int(x) for x in v)


# --- exp1 / exp2: task complexity and disentangler robustness ----------------

@dataclass
class TaskExperimentConfig:
    tasks: tuple[int, ...] = (0, 2, 8)
    seeds: tuple[int, ...] = (0, 1, 2)
    depths: tuple[int, ...] = (4, 7, 13)
    r_values: tuple[float, ...] = (1.0,)
    input_shape: tuple[int, ...] = (1, 8, 8)
    output_shape: tuple[int, ...] = (8, 4, 4)
    base_widths: tuple[int, ...] = (8, 16, 32)
    target_m: int = 2
    n_train: int = 256
    n_test: int = 64
    target_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(epochs=60, lr=3e-3, batch_size=32))
    distill: DistillConfig = field(
        default_factory=lambda: DistillConfig(epochs=60, lr=2e-3, batch_size=32))

    def __post_init__(self):
        for name in ("tasks", "seeds", "depths", "input_shape", "output_shape", "base_widths"):
            setattr(self, name, _tuple(getattr(self, name)))
        self.r_values = tuple(float(r) for r in self.r_values)
        if any(r <= 0 for r in self.r_values):
            raise ValidationError("width factors must be positive")
        if any(n < 0 for n in self.tasks):
            raise ValidationError("task orders must be >= 0")
        self.target_train = _from_dict(TrainConfig, self.target_train)
        self.distill = _from_dict(DistillConfig, self.distill)


def _target_for(n: int, seed: int, cfg: TaskExperimentConfig, cache: dict | None):
    key = ("target", n, seed)
    if cache is not None and key in cache:
        return cache[key]
    ds = gen_dataset(DatasetSpec("task_n", n=n, task_seed=seed, n_train=cfg.n_train,
                                 n_test=cfg.n_test, input_shape=cfg.input_shape,
                                 output_shape=cfg.output_shape, seed=seed))
    net = train_target_net(ds, cfg.target_m, cfg.base_widths, cfg.target_train, seed)
    if cache is not None:
        cache[key] = (ds, net)
    return ds, net


def task_run(n: int, seed: int, r: float, cfg: TaskExperimentConfig,
             cache: dict | None = None) -> dict:
    """Distil and decompose the Task-n target net's output for one seed and width."""
    key = ("run", n, seed, float(r))
    if cache is not None and key in cache:
        return cache[key]
    ds, net = _target_for(n, seed, cfg, cache)
    feats = net(ds.x_train)
    fam_spec = DisentanglerFamilySpec.from_depths(cfg.depths, r=r, base_widths=cfg.base_widths)
    dcfg = DistillConfig(**{**cfg.distill.to_dict(), "seed": seed})
    fam = distill_features(feats, ds.x_train, fam_spec, dcfg)
    dec = decompose(fam, feats, ds.x_train, ds.id)
    stats = significance(dec)
    out = {"task": n, "seed": seed, "r": float(r), "depths": list(cfg.depths),
           "rho": stats.rho, "residual_share": stats.residual_share,
           "order": weighted_complexity_order(stats),
           "residual_curve": [c for _, c in residual_curve(dec)],
           "target_fit": net.meta["final_loss"], "distill_final": fam.final_loss,
           "identity_max_err": float(np.max(np.abs(dec.telescoped() - dec.feature)))}
    if cache is not None:
        cache[key] = out
    return out


def run_task_complexity_experiment(cfg: TaskExperimentConfig,
                                   cache: dict | None = None) -> dict:
    runs = [task_run(n, s, 1.0, cfg, cache) for n in cfg.tasks for s in cfg.seeds]
    per_task = {}
    for n in cfg.tasks:
        rs = [r for r in runs if r["task"] == n]
        curves = np.array([r["residual_curve"] for r in rs])
        per_task[str(n)] = {
            "median_order": float(np.median([r["order"] for r in rs])),
            "median_rho_first": float(np.median([r["rho"][0] for r in rs])),
            "median_residual_curve": np.median(curves, axis=0).tolist(),
        }
    return {"runs": runs, "per_task": per_task}


def normalized(rho) -> np.ndarray:
    rho = np.asarray(rho, dtype=np.float64)
    return rho / rho.sum()


def max_pairwise_l1(dists) -> float:
    dists = [normalized(d) for d in dists]
    return max((float(np.abs(a - b).sum()) for a, b in itertools.combinations(dists, 2)),
               default=0.0)


def run_disentangler_robustness(cfg: TaskExperimentConfig, cache: dict | None = None) -> dict:
    """Per seed, the max pairwise L1 distance between normalised rho_c over widths."""
    (task,) = cfg.tasks[:1]
    per_seed = []
    for s in cfg.seeds:
        runs = [task_run(task, s, r, cfg, cache) for r in cfg.r_values]
        per_seed.append({"seed": s, "rho": {str(r["r"]): r["rho"] for r in runs},
                         "max_l1": max_pairwise_l1([r["rho"] for r in runs])})
    return {"task": task, "r_values": list(cfg.r_values), "per_seed": per_seed,
            "median_max_l1": float(np.median([p["max_l1"] for p in per_seed]))}


# --- classification experiments (exp3 to exp6) ----------------------------------

@dataclass
class ClassificationConfig:
    dataset: DatasetSpec = field(default_factory=lambda: DatasetSpec(
        "blobs", classes=4, spread=2.0, n_train=128, n_test=128, input_shape=(1, 8, 8)))
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    analysis: AnalysisConfig = field(default_factory=lambda: AnalysisConfig(
        base_widths=(8, 16, 32)))
    exemplars: int = 2
    substitution_depth: int = 7
    prune_fraction: float = 0.5
    conv_bits: int = 8
    fc_bits: int = 5
    retrain: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, lr=1e-3))
    student_depth: int = 7
    # exp6 model family
    family_blocks: tuple[int, ...] = (1, 2)
    family_sizes: tuple[int, ...] = (16, 32, 64, 96, 128, 192)
    target_kind: str = "accuracy"
    cv_train: int = 8
    cv_test: int = 4
    cv_repeats: int = 100
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.dataset, dict):
            self.dataset = DatasetSpec(**self.dataset)
        if isinstance(self.teacher, dict):
            self.teacher = TeacherConfig(**self.teacher)
        if isinstance(self.analysis, dict):
            self.analysis = AnalysisConfig(**self.analysis)
        self.retrain = _from_dict(TrainConfig, self.retrain)
        self.family_blocks = _tuple(self.family_blocks)
        self.family_sizes = _tuple(self.family_sizes)
        if self.target_kind not in ("accuracy", "task-loss"):
            raise ValidationError(f"unknown target kind {self.target_kind!r}")


def _classification_setup(cfg: ClassificationConfig):
    spec = DatasetSpec(**{**cfg.dataset.to_dict(), "seed": cfg.seed})
    ds = gen_dataset(spec)
    teacher = train_classifier(ds, cfg.teacher, seed=derive_seed(cfg.seed, "teacher"))
    exemplars = [train_classifier(ds, cfg.teacher, seed=derive_seed(cfg.seed, "exemplar", k))
                 for k in range(cfg.exemplars)]
    return ds, teacher, exemplars


def run_attribution_experiment(cfg: ClassificationConfig) -> dict:
    ds, teacher, exemplars = _classification_setup(cfg)
    res = analyse_model("original", teacher, ds.x_train, ds.y_train, ds.x_test, ds.y_test,
                        cfg.analysis, exemplars, seed=cfg.seed, dataset_id=ds.id)
    return {"rows": res.rows(), "analysis": res.summary()}


def run_substitution_experiment(cfg: ClassificationConfig) -> dict:
    ds, teacher, _ = _classification_setup(cfg)
    fam_spec = DisentanglerFamilySpec.from_depths([cfg.substitution_depth],
                                                  base_widths=cfg.analysis.base_widths)
    dcfg = DistillConfig(**{**cfg.analysis.distill.to_dict(), "seed": cfg.seed})
    fam = distill_features(teacher.feature(ds.x_train), ds.x_train, fam_spec, dcfg)
    std, net = fam.standardizer, fam.nets[0]
    x, y = ds.x_test, ds.y_test
    f = teacher.feature(x)
    return {"depth": cfg.substitution_depth,
            "phi": feature_substitution_eval(teacher, x, y, lambda v: std.invert(net(v))),
            "identity": feature_substitution_eval(teacher, x, y, f),
            "zero": feature_substitution_eval(teacher, x, y, np.zeros_like(f))}


def run_compression_experiment(cfg: ClassificationConfig) -> dict:
    ds, teacher, exemplars = _classification_setup(cfg)
    compressed, creport = compress_model(teacher, cfg.prune_fraction, cfg.conv_bits, cfg.fc_bits,
                                         cfg.retrain, ds.x_train, ds.y_train)
    dcfg = DistillConfig(**{**cfg.analysis.distill.to_dict(), "seed": cfg.seed})
    distilled = distill_model(teacher, cfg.student_depth, ds.x_train, dcfg,
                              cfg.analysis.base_widths, seed=cfg.seed)
    rows, summaries = [], []
    for name, net in (("original", teacher), ("compressed", compressed),
                      ("distilled", distilled)):
        res = analyse_model(name, net, ds.x_train, ds.y_train, ds.x_test, ds.y_test,
                            cfg.analysis, exemplars, seed=cfg.seed, dataset_id=ds.id)
        rows += res.rows()
        summaries.append({**res.summary(), "test_accuracy": accuracy(net, ds.x_test, ds.y_test)})
    return {"rows": rows, "models": summaries, "compression": creport.to_dict()}


def model_family(cfg: ClassificationConfig, ds):
    """Teachers varying depth (blocks per stage) and training-set size."""
    for blocks, size in itertools.product(cfg.family_blocks, cfg.family_sizes):
        tcfg = TeacherConfig(cfg.teacher.arch, blocks, cfg.teacher.widths, cfg.teacher.train)
        sub = type(ds)(ds.spec, ds.x_train[:size], ds.y_train[:size], ds.x_test, ds.y_test,
                       ds.task)
        net = train_classifier(sub, tcfg, seed=derive_seed(cfg.seed, "family", blocks, size))
        yield f"b{blocks}-n{size}", net


def run_family_experiment(cfg: ClassificationConfig) -> dict:
    """Profiles of a model family, regressed onto test performance.

    Every model is analysed on the same pool (the largest training set) so
    profiles are comparable across models.
    """
    spec = DatasetSpec(**{**cfg.dataset.to_dict(), "seed": cfg.seed,
                          "n_train": max(cfg.family_sizes)})
    ds = gen_dataset(spec)
    exemplars = [train_classifier(ds, cfg.teacher, seed=derive_seed(cfg.seed, "exemplar", k))
                 for k in range(cfg.exemplars)]
    names, profiles, targets, rows = [], [], [], []
    for name, net in model_family(cfg, ds):
        res = analyse_model(name, net, ds.x_train, ds.y_train, ds.x_test, ds.y_test,
                            cfg.analysis, exemplars, seed=cfg.seed, dataset_id=ds.id)
        if cfg.target_kind == "accuracy":
            target = accuracy(net, ds.x_test, ds.y_test)
        else:
            target = task_loss(net, net.feature(ds.x_test), ds.y_test)
        names.append(name)
        profiles.append(res.profile.values)
        targets.append(target)
        rows += res.rows()
    P = np.array(profiles)
    cv = cross_validate(P, targets, cfg.cv_train, cfg.cv_test, cfg.cv_repeats, seed=cfg.seed)
    pca = pca2d(P)
    return {"rows": rows, "models": names, "profiles": P.tolist(), "targets": targets,
            "target_kind": cfg.target_kind, "cv": cv.to_dict(), "pca": pca.to_dict()}


# --- reliability sanity check ---------------------------------------------------

# full budget with the plateau stop off: an early stop on a noisy epoch left
# the identical-teacher fit well short of convergence
RELIABILITY_STACK = TrainConfig(epochs=2000, lr=5e-3, batch_size=32, patience=1_000_000)
RELIABILITY_DISTILL = DistillConfig(epochs=1000, lr=5e-3, batch_size=32)


def _stack_splits(feats, x, phis, seed):
    stack = build_reliability_stack(4, [f.shape[1:] for f in feats], x.shape[1:], seed=seed)
    train_phase_g(stack, feats, x, TrainConfig(**{**RELIABILITY_STACK.to_dict(), "seed": seed}))
    train_phase_h(stack, x)
    return stack, [extract_split(stack, k, phi, x, 4) for k, phi in enumerate(phis)]


def reliability_sanity_run(seed: int) -> dict:
    """Depth-4 stacks on three copies of one teacher vs three random target nets.

    Returns the mean rho^reli of each set, the identical-teacher phase-g loss
    relative to the summed target variance, and every split produced.
    """
    ins = (1, 8, 8)
    ds = gen_dataset(DatasetSpec("blobs", classes=4, n_train=32, n_test=32, input_shape=ins,
                                 seed=seed))
    teacher = train_classifier(ds, TeacherConfig(widths=(8, 8, 8),
                                                 train=TrainConfig(epochs=30, lr=3e-3)), seed=seed)
    x = ds.x_train
    f = teacher.feature(x)
    dcfg = DistillConfig(**{**RELIABILITY_DISTILL.to_dict(), "seed": seed})

    def phi(g):
        return decompose(distill_features(g, x, DisentanglerFamilySpec((1,)), dcfg), g, x).phi[0]

    # identical teachers share one disentangler output
    same, same_splits = _stack_splits([f, f, f], x, [phi(f)] * 3, seed)
    fs = [build_task_net(0, derive_seed(seed, "proj", k), ins, f.shape[1:])(x) for k in range(3)]
    _, rand_splits = _stack_splits(fs, x, [phi(g) for g in fs], seed)
    hg = same.history["phase_g"]
    return {"seed": seed,
            "identical": float(np.mean([sp.rho for sp in same_splits])),
            "random": float(np.mean([sp.rho for sp in rand_splits])),
            "loss_ratio": hg["final_loss"] / hg["target_variance"],
            "splits": same_splits + rand_splits}


# --- registry and resumable execution --------------------------------------

EXPERIMENTS: dict[str, tuple[type, Callable[..., dict]]] = {
    "exp1": (TaskExperimentConfig, run_task_complexity_experiment),
    "exp2": (TaskExperimentConfig, run_disentangler_robustness),
    "exp3": (ClassificationConfig, run_attribution_experiment),
    "exp4": (ClassificationConfig, run_substitution_experiment),
    "exp5": (ClassificationConfig, run_compression_experiment),
    "exp6": (ClassificationConfig, run_family_experiment),
}

EXP_DEFAULTS = {
    # small sample, wide base and no plateau stop: every width can fit the target
    "exp2": {"tasks": [8], "r_values": [0.5, 1.0, 2.0], "n_train": 32,
             "base_widths": [16, 32, 64],
             "distill": {"epochs": 600, "lr": 5e-3, "tol": 1e-9, "patience": 1_000_000}},
    # a single analysis depth keeps the regressor at 3 unknowns for 12 models
    "exp6": {"dataset": {"kind": "rings", "classes": 4, "spread": 1.0, "n_train": 192,
                         "n_test": 256, "input_shape": [1, 8, 8]},
             "analysis": {"depths": [4], "base_widths": [8, 16, 32],
                          "distill": {"epochs": 30, "lr": 2e-3},
                          "stack": {"epochs": 30, "lr": 2e-3}}},
}


def config_to_dict(cfg) -> dict:
    return asdict(cfg)


def make_config(name: str, overrides: dict | None = None, seed: int | None = None):
    if name not in EXPERIMENTS:
        raise ValidationError(f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}")
    cls, _ = EXPERIMENTS[name]
    d = {**EXP_DEFAULTS.get(name, {}), **(overrides or {})}
    if seed is not None:
        if cls is TaskExperimentConfig:
            d["seeds"] = [seed]
        else:
            d["seed"] = seed
    return _from_dict(cls, d)


def run_experiment(name: str, cfg, out_root, cache: dict | None = None,
                   force: bool = False) -> tuple[RunRecord, Path]:
    """Run ``name`` into a directory keyed by its config hash.

    Re-running with an identical config finds the finished record and
    returns it without recomputing.
    """
    cfg_dict = config_to_dict(cfg)
    directory = run_dir(out_root, name, cfg_dict)
    if not force:
        rec = existing_record(directory, name, cfg_dict)
        if rec is not None:
            return rec, directory
    t0 = time.perf_counter()
    _, fn = EXPERIMENTS[name]
    result = fn(cfg, cache) if name in ("exp1", "exp2") else fn(cfg)
    seeds = list(cfg.seeds) if hasattr(cfg, "seeds") else [cfg.seed]
    rows = result.pop("rows", [])
    rec = RunRecord(name, cfg_dict, seeds, tables=result, rows=rows,
                    wall_clock=time.perf_counter() - t0)
    emit_report(rec, "csv", directory)
    emit_report(rec, "json", directory)
    rec.artifacts = ["report.csv", "report.json"]
    emit_report(rec, "json", directory)
    return rec, directory
