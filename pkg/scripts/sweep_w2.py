"""W2 between synthetic and held-out test errors over a nuisance grid, one profile per env."""
import argparse

import numpy as np

from shiftsafe.harness.config import load
from shiftsafe.harness.experiment import Workspace, nuisance_sweep

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("--out", default="runs/case_study")
p.add_argument("--config", default="configs/case_study.json")
args = p.parse_args()

rows, summary = nuisance_sweep(Workspace(load(args.config), args.out))
for s in summary:
    etas = sorted({r["eta"] for r in rows if r["env"] == s["env"]})
    prof = [np.mean([r["w2"] for r in rows if r["env"] == s["env"] and r["eta"] == e]) for e in etas]
    bars = " ".join(f"{e:.3f}:{w:.4f}" for e, w in zip(etas, prof))
    print(f"E{s['env']} eta_j={s['eta_j']:.4f} argmin={s['argmin']:.3f} {'hit' if s['hit'] else 'miss'}\n  {bars}")
