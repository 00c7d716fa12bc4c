"""``fcx`` command line: one subcommand per pipeline stage plus ``run-exp``.

Every subcommand reads a JSON config (``--config``), writes into ``--out``
and accepts ``--seed`` to override the config seed. Exit codes: 0 success,
2 validation error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from fcx import container
from fcx.attribution import attribute
from fcx.disentangler import (
    DisentanglerFamilySpec,
    DistillConfig,
    decompose,
    distill,
    export_decomposition,
    load_decomposition,
    residual_curve,
    significance,
    weighted_complexity_order,
)
from fcx.errors import TrainingDiverged, ValidationError
from fcx.pipeline.analysis import AnalysisConfig, analyse_model
from fcx.pipeline.compress import compress_model, distill_model
from fcx.pipeline.data import DatasetSpec, gen_dataset, load_dataset
from fcx.pipeline.experiments import make_config, run_experiment
from fcx.pipeline.profile import cross_validate, fit_regressor, pca2d
from fcx.pipeline.report import RunRecord, emit_report, jsonable, load_record
from fcx.pipeline.teacher import TeacherConfig, train_classifier
from fcx.reliability import build_reliability_stack, extract_split, train_phase_g, train_phase_h
from fcx.training import TrainConfig
from fcx.zoo import load_checkpoint, save_checkpoint

log = logging.getLogger("fcx")


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(jsonable(obj), sort_keys=True, indent=1, allow_nan=False) + "\n")
    return path


def _dataset(cfg: dict, seed: int | None):
    """Dataset from ``dataset_path`` or an inline ``dataset`` spec."""
    if "dataset_path" in cfg:
        return load_dataset(cfg["dataset_path"])
    spec = dict(cfg.get("dataset", {}))
    if seed is not None:
        spec["seed"] = seed
    return gen_dataset(DatasetSpec(**spec))


def _seed(cfg: dict, seed: int | None) -> int:
    return int(cfg.get("seed", 0) if seed is None else seed)


def _require(cfg: dict, *keys):
    missing = [k for k in keys if k not in cfg]
    if missing:
        raise ValidationError(f"config is missing {missing}")


# --- subcommands --------------------------------------------------------------

def cmd_gen_data(cfg, out: Path, seed):
    spec = dict(cfg.get("dataset", cfg))
    if seed is not None:
        spec["seed"] = seed
    spec = DatasetSpec(**spec)
    ds = gen_dataset(spec)
    ds.save(out / "dataset.npz")
    _write_json(out / "dataset.json", {"spec": spec.to_dict(), "id": spec.id})


def cmd_train_teacher(cfg, out: Path, seed):
    ds = _dataset(cfg, seed)
    tcfg = TeacherConfig(**cfg.get("teacher", {}))
    net = train_classifier(ds, tcfg, seed=_seed(cfg, seed))
    save_checkpoint(net, out / "teacher.ckpt")
    _write_json(out / "teacher.json", {"spec": net.spec.to_dict(), "meta": net.meta})


def _family(cfg):
    depths = cfg.get("depths", [4, 7, 13])
    kw = {k: cfg[k] for k in ("r", "base_widths") if k in cfg}
    return DisentanglerFamilySpec.from_depths(depths, **kw)


def cmd_disentangle(cfg, out: Path, seed):
    _require(cfg, "teacher")
    teacher = load_checkpoint(cfg["teacher"]).freeze()
    ds = _dataset(cfg, seed)
    dcfg = DistillConfig(**{**cfg.get("distill", {}), "seed": _seed(cfg, seed)})
    fam = distill(teacher, _family(cfg), ds.x_train, dcfg)
    dec_tr = decompose(fam, teacher.feature(ds.x_train), ds.x_train, ds.id + ":train")
    dec_te = decompose(fam, teacher.feature(ds.x_test), ds.x_test, ds.id + ":test")
    export_decomposition(dec_tr, out / "decomposition_train.ckpt")
    export_decomposition(dec_te, out / "decomposition_test.ckpt")
    for d, net in zip(fam.depths, fam.nets):
        save_checkpoint(net, out / f"disentangler_l{d}.ckpt")
    stats = significance(dec_tr)
    _write_json(out / "components.json", {
        "depths": stats.depths, "var_components": stats.var_components, "rho_c": stats.rho,
        "var_feature": stats.var_feature, "residual_share": stats.residual_share,
        "complexity_order": weighted_complexity_order(stats),
        "residual_curve": residual_curve(dec_tr), "final_loss": fam.final_loss})


def cmd_attribute(cfg, out: Path, seed):
    _require(cfg, "teacher", "decomposition_train", "decomposition_test")
    teacher = load_checkpoint(cfg["teacher"]).freeze()
    ds = _dataset(cfg, seed)
    dec_tr = load_decomposition(cfg["decomposition_train"])
    dec_te = load_decomposition(cfg["decomposition_test"])
    stats = significance(dec_tr)
    rep = attribute(dec_tr, dec_te, teacher, ds.y_train, ds.y_test, stats.var_components,
                    guard=cfg.get("guard", 1e-6), permutations=cfg.get("permutations"),
                    seed=_seed(cfg, seed))
    _write_json(out / "attribution.json", rep.to_dict())
    (out / "subsets.csv").write_text(rep.subset_csv())


def cmd_reliability(cfg, out: Path, seed):
    _require(cfg, "teacher", "exemplars", "depth")
    teacher = load_checkpoint(cfg["teacher"]).freeze()
    nets = [teacher] + [load_checkpoint(p).freeze() for p in cfg["exemplars"]]
    ds = _dataset(cfg, seed)
    depth = int(cfg["depth"])
    s = _seed(cfg, seed)
    feats = [n.feature(ds.x_train) for n in nets]
    kw = {"base_widths": cfg["base_widths"]} if "base_widths" in cfg else {}
    stack = build_reliability_stack(depth, [f.shape[1:] for f in feats], ds.x_train.shape[1:],
                                    R=cfg.get("R", 10), seed=s, **kw)
    train_phase_g(stack, feats, ds.x_train, TrainConfig(**{**cfg.get("stack", {}), "seed": s}))
    train_phase_h(stack, ds.x_train, solver=cfg.get("solver", "lstsq"))
    dcfg = DistillConfig(**{**cfg.get("distill", {}), "seed": s})
    fam_spec = DisentanglerFamilySpec.from_depths([depth], **kw)
    rho = {}
    for k, (net, f) in enumerate(zip(nets, feats)):
        dec = decompose(distill(net, fam_spec, ds.x_train, dcfg), f, ds.x_train)
        split = extract_split(stack, k, dec.phi[0], ds.x_train, depth,
                              cfg.get("denominator", "disentangler"))
        rho[str(k)] = split.rho
        if k == 0:
            container.write(out / "split.ckpt", {"kind": "split", "depth": depth},
                            {"reliable": split.reliable, "unreliable": split.unreliable,
                             "phi": split.phi})
    _write_json(out / "reliability.json", {"depth": depth, "rho_reli": rho,
                                           "history": stack.history})


def cmd_compress(cfg, out: Path, seed):
    _require(cfg, "teacher")
    teacher = load_checkpoint(cfg["teacher"]).freeze()
    ds = _dataset(cfg, seed)
    retrain = TrainConfig(**{**cfg["retrain"], "seed": _seed(cfg, seed)}) \
        if "retrain" in cfg else None
    net, rep = compress_model(teacher, cfg.get("prune_fraction", 0.5), cfg.get("conv_bits", 8),
                              cfg.get("fc_bits", 5), retrain, ds.x_train, ds.y_train)
    save_checkpoint(net, out / "compressed.ckpt")
    _write_json(out / "compression.json", rep.to_dict())


def cmd_distill_model(cfg, out: Path, seed):
    _require(cfg, "teacher")
    teacher = load_checkpoint(cfg["teacher"]).freeze()
    ds = _dataset(cfg, seed)
    s = _seed(cfg, seed)
    dcfg = DistillConfig(**{**cfg.get("distill", {}), "seed": s})
    kw = {"base_widths": cfg["base_widths"]} if "base_widths" in cfg else {}
    net = distill_model(teacher, int(cfg.get("depth", 7)), ds.x_train, dcfg, seed=s, **kw)
    save_checkpoint(net, out / "distilled.ckpt")
    _write_json(out / "distilled.json", net.meta)


def cmd_profile(cfg, out: Path, seed):
    _require(cfg, "teacher", "exemplars")
    teacher = load_checkpoint(cfg["teacher"]).freeze()
    exemplars = [load_checkpoint(p).freeze() for p in cfg["exemplars"]]
    ds = _dataset(cfg, seed)
    acfg = AnalysisConfig(**cfg.get("analysis", {}))
    res = analyse_model(cfg.get("name", "model"), teacher, ds.x_train, ds.y_train, ds.x_test,
                        ds.y_test, acfg, exemplars, seed=_seed(cfg, seed), dataset_id=ds.id)
    _write_json(out / "profile.json", res.summary())
    rec = RunRecord("profile", cfg, [_seed(cfg, seed)], tables=res.summary(), rows=res.rows())
    emit_report(rec, "csv", out)
    emit_report(rec, "json", out)


def _profiles(cfg):
    if "profiles_path" in cfg:
        data = json.loads(Path(cfg["profiles_path"]).read_text())
        return np.asarray(data["profiles"], dtype=np.float64), data.get("targets")
    _require(cfg, "profiles")
    return np.asarray(cfg["profiles"], dtype=np.float64), cfg.get("targets")


def cmd_regress(cfg, out: Path, seed):
    P, targets = _profiles(cfg)
    if targets is None:
        raise ValidationError("regression needs targets")
    kind = cfg.get("target_kind", "accuracy")
    model = fit_regressor(P, targets, kind, ridge=cfg.get("ridge", False))
    result = {"model": model.to_dict()}
    if "train_k" in cfg:
        cv = cross_validate(P, targets, cfg["train_k"], cfg["test_k"], cfg.get("repeats", 100),
                            seed=_seed(cfg, seed), ridge=cfg.get("ridge", False))
        result["cv"] = cv.to_dict()
    _write_json(out / "regression.json", result)


def cmd_pca(cfg, out: Path, seed):
    P, _ = _profiles(cfg)
    _write_json(out / "pca.json", pca2d(P).to_dict())


def cmd_report(cfg, out: Path, seed):
    _require(cfg, "record")
    rec = load_record(cfg["record"])
    for fmt in cfg.get("formats", ["json", "csv"]):
        emit_report(rec, fmt, out)


def cmd_run_exp(cfg, out: Path, seed, name: str):
    exp_cfg = make_config(name, cfg, seed)
    rec, directory = run_experiment(name, exp_cfg, out)
    print(directory)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "disentangle": cmd_disentangle,
    "attribute": cmd_attribute,
    "reliability": cmd_reliability,
    "compress": cmd_compress,
    "distill-model": cmd_distill_model,
    "profile": cmd_profile,
    "regress": cmd_regress,
    "pca": cmd_pca,
    "report": cmd_report,
    "run-exp": cmd_run_exp,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fcx", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if name == "run-exp":
            p.add_argument("--name", required=True,
                           choices=[f"exp{i}" for i in range(1, 7)])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = json.loads(args.config.read_text()) if args.config else {}
        if not isinstance(cfg, dict):
            raise ValidationError("config must be a JSON object")
        args.out.mkdir(parents=True, exist_ok=True)
        fn = COMMANDS[args.command]
        if args.command == "run-exp":
            fn(cfg, args.out, args.seed, args.name)
        else:
            fn(cfg, args.out, args.seed)
    except TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        print(f"fcx: training diverged: {exc}", file=sys.stderr)
        return 3
    except (ValidationError, json.JSONDecodeError, TypeError, KeyError) as exc:
        print(f"fcx: invalid input: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"fcx: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
