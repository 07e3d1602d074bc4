"""Synthetic build time against K, plus per-step totals from saved closed-loop solves."""
import argparse

import numpy as np

from shiftsafe.harness.config import load
from shiftsafe.harness.experiment import Workspace, per_step_timing, synthetic_generation_ms
from shiftsafe.harness.report import load_results

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("--out", default="runs/case_study")
p.add_argument("--config", default="configs/case_study.json")
p.add_argument("--K", type=int, nargs="+", default=[250, 500, 1000])
args = p.parse_args()

ws = Workspace(load(args.config), args.out)
solves = [np.array(ep["solve_ms"]) for d in load_results(ws.root) if d["row"]["loop"] == "closed"
          for ep in d["episodes"]]
print("K,build_ms,step_mean_ms,step_p95_ms,unamortized_mean_ms")
for K in args.K:
    gen = float(synthetic_generation_ms(ws, K, [0.04, 0.05]).mean())
    if solves:
        t = per_step_timing(solves, gen)
        print(f"{K},{gen:.0f},{t['amortized_mean_ms']:.1f},{t['amortized_p95_ms']:.1f},{t['unamortized_mean_ms']:.0f}")
    else:
        print(f"{K},{gen:.0f},,,")
