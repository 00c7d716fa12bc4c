"""Held-out check of the reliability sanity regime.

Runs the identical-teacher vs random-pseudo-teacher comparison on seeds that
the acceptance suite does not use and writes the rho values and the
identical-teacher loss ratios to ``scripts/results``.
"""

import argparse
import json
import time
from pathlib import Path

from fcx.pipeline.experiments import RELIABILITY_DISTILL, RELIABILITY_STACK, reliability_sanity_run

RESULTS = Path(__file__).resolve().parent / "results"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(100, 106)))
    ap.add_argument("--out", type=Path, default=RESULTS / "reliability_calibration.json")
    args = ap.parse_args()
    t0 = time.perf_counter()
    runs = []
    for s in args.seeds:
        r = reliability_sanity_run(s)
        runs.append({k: r[k] for k in ("seed", "identical", "random", "loss_ratio")})
        print(json.dumps(runs[-1]), flush=True)
    summary = {"seeds": args.seeds, "stack": RELIABILITY_STACK.to_dict(),
               "distill": RELIABILITY_DISTILL.to_dict(), "runs": runs,
               "worst_loss_ratio": max(r["loss_ratio"] for r in runs),
               "bound": 1e-2, "seconds": round(time.perf_counter() - t0, 1)}
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(summary, indent=1) + "\n")


if __name__ == "__main__":
    main()
