"""Persist per-case results and assemble the summary tables."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, List

import numpy as np

from .experiment import CaseResult

COLUMNS = ["env", "case", "loop", "n", "coverage", "safety", "infeasible", "mean_ms", "p95_ms", "r_used"]


def _clean(v):
    if isinstance(v, (np.floating, float)):
        return None if not math.isfinite(float(v)) else float(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


def result_path(root, loop: str, case: int, env) -> Path:
    return Path(root) / "results" / f"{loop}_case{case}_env{env}.json"


def save_result(root, res: CaseResult, traces: bool = False, seconds: float = float("nan")) -> Path:
    """Row, per-episode summaries and optionally full traces for one (case, env, loop)."""
    path = result_path(root, res.loop, res.case, res.env)
    path.parent.mkdir(parents=True, exist_ok=True)
    episodes = [{"seed": t.seed, "eta": t.eta, "coverage": t.coverage, "collision": t.collision,
                 "fallback": t.fallback, "infeasible": t.infeasible, "score": t.score,
                 "scale": t.radius_scale, "min_margin": t.min_margin, "r_used": t.r_used,
                 "steps": int(t.step_ms.size), "solve_ms_sum": float(t.step_ms.sum()),
                 "solve_ms": [round(float(x), 3) for x in t.step_ms], "gen_ms": g}
                for t, g in zip(res.traces, res.gen_ms)]
    doc = {"row": {k: _clean(v) for k, v in res.row().items()}, "episodes": episodes,
           "failures": res.failures, "seconds": seconds}
    path.write_text(json.dumps(doc, default=_clean))
    if traces:
        tdir = path.parent / "traces"
        tdir.mkdir(exist_ok=True)
        with open(tdir / f"{path.stem}.jsonl", "w") as fh:
            for t in res.traces:
                fh.write(json.dumps(t.to_json(), default=_clean) + "\n")
    return path


def load_results(root) -> List[dict]:
    return [json.loads(p.read_text()) for p in sorted((Path(root) / "results").glob("*.json"))]


def emit_report(rows: Iterable[dict], out_dir) -> List[Path]:
    """Write ``report.csv``, ``report.json`` and a markdown table."""
    rows = sorted(rows, key=lambda r: (r["loop"], r["case"], int(r["env"]) if str(r["env"]).isdigit() else -1))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k) for k in COLUMNS})
    (out / "report.json").write_text(json.dumps(rows, indent=1, default=_clean))
    lines = ["| " + " | ".join(COLUMNS) + " |", "|" + "---|" * len(COLUMNS)]
    for r in rows:
        cells = []
        for k in COLUMNS:
            v = r.get(k)
            cells.append(f"{v:.3f}" if isinstance(v, float) else str(v))
        lines.append("| " + " | ".join(cells) + " |")
    (out / "report.md").write_text("\n".join(lines) + "\n")
    return [out / "report.csv", out / "report.json", out / "report.md"]
