"""Command-line entry point: ``shiftsafe <command> --out DIR [options]``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time

import numpy as np

from . import config as cfgmod
from .experiment import (Calibrator, CaseSpec, Workspace, collision_consistency, nuisance_sweep, per_step_timing,
                         run_case, synthetic_generation_ms)
from .report import emit_report, load_results, result_path, save_result

log = logging.getLogger("shiftsafe")


def _workspace(args) -> Workspace:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.ExperimentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return Workspace(cfg, args.out)


def cmd_gen_data(args):
    _workspace(args).gen_data()


def cmd_train(args):
    ws = _workspace(args)
    m = ws.train_diffusion()
    print(f"trained in {m.train_meta['train_seconds']:.1f}s -> {ws.model_path}")


def cmd_fit_sigma(args):
    ws = _workspace(args)
    for which in ("syn", "base"):
        tab = ws.sigma(which)
        print(which, "sigma_min", f"{tab.sigma_min:.5f}", "h=H", np.round(tab.sigma[-1], 5).tolist())


def cmd_estimate_shift(args):
    ws = _workspace(args)
    tables = ws.shift_tables()
    cal = Calibrator(ws)
    print("env,eta,n_val,bound_raw,r")
    for env, tab in tables.items():
        b = cal.analytic_bound(tab["eta"])
        r = b.value / ws.sigma("syn").sigma_min
        print(f"{env},{tab['eta']:.5f},{len(tab['scores'])},{b.value:.6g},{r:.4g}")


def cmd_run(args):
    ws = _workspace(args)
    cal = Calibrator(ws)
    episodes = args.episodes or ws.cfg.run.episodes
    rows = []
    t0 = time.perf_counter()
    for case in args.case:
        for env in args.env:
            if args.resume and result_path(ws.root, args.loop, case, env).exists():
                continue
            t1 = time.perf_counter()
            res = run_case(ws, CaseSpec(case, args.loop), env, episodes, cal)
            save_result(ws.root, res, traces=args.traces, seconds=time.perf_counter() - t1)
            row = res.row()
            rows.append(row)
            bad = collision_consistency(res.traces)
            print(json.dumps({**row, "inconsistent": len(bad), "seconds": round(time.perf_counter() - t1, 1)}),
                  flush=True)
    print(f"total {time.perf_counter() - t0:.1f}s")


def cmd_sweep(args):
    ws = _workspace(args)
    rows, summary = nuisance_sweep(ws)
    for r in summary:
        print(f"env {r['env']}: eta_j={r['eta_j']:.4f} argmin={r['argmin']:.3f} {'ok' if r['hit'] else 'miss'}")
    path = ws.root / "sweep_w2.csv"
    with open(path, "w") as fh:
        fh.write("env,eta_j,eta,tau,w2,n_syn,n_test\n")
        for r in rows:
            fh.write(f"{r['env']},{r['eta_j']!r},{r['eta']!r},{r['tau']},{r['w2']!r},{r['n_syn']},{r['n_test']}\n")
    print(f"{sum(r['hit'] for r in summary)}/{len(summary)} within one grid step; rows in {path}")


def cmd_timing(args):
    ws = _workspace(args)
    K = args.K or ws.cfg.calib.timing_K
    gen = synthetic_generation_ms(ws, K, np.linspace(0.03, 0.055, args.reps))
    solves = [np.array(ep["solve_ms"]) for doc in load_results(ws.root) if doc["row"]["loop"] == "closed"
              for ep in doc["episodes"]]
    if not solves:
        sys.exit("no closed-loop results yet; run `shiftsafe run` first")
    stats = per_step_timing(solves, float(gen.mean()))
    stats["K"] = K
    stats["gen_ms_each"] = gen.round(1).tolist()
    (ws.root / "timing.json").write_text(json.dumps(stats, indent=1))
    print(json.dumps(stats, indent=1))


def gate_failures(rows, min_coverage=0.85, min_safety=0.90, n_shifted=3) -> list:
    """Closed-loop gates: robust cases keep coverage and safety, fixed calibration degrades."""
    closed = [r for r in rows if r["loop"] == "closed"]
    bad = [f"case {r['case']} env {r['env']}: coverage {r['coverage']:.3f} safety {r['safety']:.3f}"
           for r in closed if r["case"] in (2, 3)
           and not (r["coverage"] >= min_coverage and r["safety"] >= min_safety)]
    base = sorted((r for r in closed if r["case"] == 0 and str(r["env"]).isdigit()), key=lambda r: int(r["env"]))
    for r in base[-n_shifted:]:
        if r["coverage"] >= min_coverage:
            bad.append(f"case 0 env {r['env']}: coverage {r['coverage']:.3f} did not degrade")
    return bad


def cmd_report(args):
    ws = _workspace(args)
    rows = [doc["row"] for doc in load_results(ws.root)]
    for p in emit_report(rows, ws.root / "report"):
        print(p)
    print((ws.root / "report" / "report.md").read_text())
    if args.gate:
        bad = gate_failures(rows)
        for line in bad:
            print("gate failed:", line)
        return 1 if bad else 0
    return 0


def _env(text: str):
    if text == "train":
        return text
    k = int(text)
    if k not in cfgmod.ENVS:
        raise argparse.ArgumentTypeError(f"env must be one of 1..10 or 'train', got {text}")
    return k


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shiftsafe", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--out", required=True, help="workspace directory for artifacts")
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int)
        sp.set_defaults(fn=fn)
        return sp

    add("gen-data", cmd_gen_data, "simulate training, validation and calibration episodes")
    add("train-diffusion", cmd_train, "fit the conditional diffusion model")
    add("fit-sigma", cmd_fit_sigma, "fit score normalizers")
    add("estimate-shift", cmd_estimate_shift, "held-out tables and analytic bounds per seen env")
    r = add("run", cmd_run, "closed- or open-loop rollouts for cases and envs")
    r.add_argument("--case", type=int, nargs="+", default=[0, 2, 3], choices=[0, 1, 2, 3])
    r.add_argument("--env", type=_env, nargs="+", default=list(cfgmod.ENVS), help="1..10 or 'train'")
    r.add_argument("--loop", choices=["closed", "open"], default="closed")
    r.add_argument("--episodes", type=int)
    r.add_argument("--traces", action="store_true", help="also write full per-episode traces")
    r.add_argument("--resume", action="store_true", help="skip cells that already have saved results")
    add("sweep-w2", cmd_sweep, "W2 between synthetic and test errors across nuisance values")
    t = add("timing", cmd_timing, "per-step wall clock from recorded solves plus fresh synthetic builds")
    t.add_argument("--K", type=int)
    t.add_argument("--reps", type=int, default=3)
    rep = add("report", cmd_report, "collect saved results into CSV, JSON and markdown")
    rep.add_argument("--gate", action="store_true", help="exit 1 when a closed-loop coverage or safety gate fails")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    return args.fn(args) or 0


if __name__ == "__main__":
    sys.exit(main())
