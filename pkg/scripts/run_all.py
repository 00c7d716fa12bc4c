"""Run exp1 to exp6 with their default configs and print a one-line summary each.

Results land in ``--out`` (default ``runs/``) under a directory per config
hash, so an interrupted sweep resumes where it stopped.
"""

import argparse
import json
import time
from pathlib import Path

from fcx.pipeline.experiments import EXPERIMENTS, make_config, run_experiment


def summarize(name, tables):
    if name == "exp1":
        return {t: round(v["median_order"], 3) for t, v in tables["per_task"].items()}
    if name == "exp2":
        return {"median_max_l1": round(tables["median_max_l1"], 3)}
    if name == "exp4":
        return tables["phi"]
    if name == "exp5":
        return {m["name"]: round(m["test_accuracy"], 3) for m in tables["models"]}
    if name == "exp6":
        return {k: round(v, 4) for k, v in tables["cv"].items() if "median" in k}
    return {"rho_c": [round(r, 3) for r in tables["analysis"]["rho_c"]]}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs"))
    ap.add_argument("--only", nargs="+", choices=sorted(EXPERIMENTS), default=sorted(EXPERIMENTS))
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--force", action="store_true", help="ignore finished runs")
    args = ap.parse_args()
    cache = {}
    for name in args.only:
        t0 = time.perf_counter()
        rec, directory = run_experiment(name, make_config(name, seed=args.seed), args.out,
                                        cache, force=args.force)
        print(f"{name} {time.perf_counter() - t0:7.1f}s {directory}")
        print("  " + json.dumps(summarize(name, rec.tables), default=str))


if __name__ == "__main__":
    main()
