"""Data generation, calibration per case, and episode rollouts.

Every random draw is keyed by ``(seed, purpose, env, index)`` so the same
test episode sees identical obstacle motion under every case.
"""
from __future__ import annotations

import enum
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .. import diffusion as dm
from ..conformal import AmbiguityKind, AmbiguitySpec, Provenance, QuantileResult, ScoreSet, robust_quantile
from ..planner import MPCProblem, MPCSolution, PlannerConfig, Status, fallback, solve
from ..predictor import DEFAULT_WINDOW, predict_all
from ..scores import (PredictionErrorTensor, SigmaTable, build_synthetic_scoreset, episode_score, fit_sigma, index_grid,
                      prediction_errors)
from ..shift import (ShiftEstimate, ShiftKind, analytic_w2_bound, build_ingredients, estimate_L2,
                     nearest_contexts, propagate_to_radius, wasserstein2_1d, wasserstein_inf_1d)
from ..sim import (EgoInput, EgoState, EpisodeTrace, check_collision, ego_step, environment,
                   estimate_nuisance, sample_environment, simulate_obstacles)
from .config import ExperimentConfig

log = logging.getLogger(__name__)

PURPOSE = {"diff-train": 1, "diff-val": 2, "base-sigma": 3, "base-calib": 4, "test": 5,
           "synthetic": 6, "l2": 7, "sweep": 8, "noise-mse": 9}


def env_code(env) -> int:
    return 0 if env == "train" else int(env)


def episode_rng(seed: int, purpose: str, env, idx: int) -> np.random.Generator:
    return np.random.default_rng([seed, PURPOSE[purpose], env_code(env), idx])


def simulate_episode(cfg: ExperimentConfig, purpose: str, env, idx: int) -> Tuple[np.ndarray, float]:
    """Obstacle trajectory (T+1, N, 2) and its buffer nuisance estimate."""
    rng = episode_rng(cfg.seed, purpose, env, idx)
    e = environment(env, dt=cfg.sim.dt)
    Y = simulate_obstacles(e, sample_environment(e, rng), cfg.sim, rng)
    return Y, estimate_nuisance(Y, cfg.sim.T_b, cfg.sim.dt)


@dataclass
class EpisodeBatch:
    Y: np.ndarray  # (n, T+1, N, 2)
    eta: np.ndarray  # (n,)
    _errors: Dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.eta)

    def errors(self, H: int, dt: float) -> np.ndarray:
        """Error tensors stacked to (n, T-1, H, N)."""
        if H not in self._errors:
            self._errors[H] = np.stack([prediction_errors(y, dt, H).entries for y in self.Y])
        return self._errors[H]


def generate(cfg: ExperimentConfig, purpose: str, env, n: int) -> EpisodeBatch:
    out = [simulate_episode(cfg, purpose, env, k) for k in range(n)]
    return EpisodeBatch(np.stack([y for y, _ in out]), np.array([e for _, e in out]))


def training_rows(batch: EpisodeBatch, H: int, dt: float) -> Tuple[np.ndarray, np.ndarray]:
    """Contexts ``(eta, t, h, i)`` and raw errors over the index set of every episode."""
    err = batch.errors(H, dt)
    g = index_grid(err.shape[1] + 1, H, err.shape[3])
    C = np.concatenate([np.column_stack([np.full(len(g), eta), g]) for eta in batch.eta])
    y = np.concatenate([e[g[:, 0] - 1, g[:, 1] - 1, g[:, 2]] for e in err])
    return C.astype(float), y


# ---------------------------------------------------------------- workspace

class Workspace:
    """Artifacts for one configuration, computed on demand and cached under ``root``."""

    def __init__(self, cfg: ExperimentConfig, root):
        self.cfg = cfg
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "data").mkdir(exist_ok=True)
        self._batches: Dict[Tuple[str, object], EpisodeBatch] = {}
        self._model: Optional[dm.DiffusionModel] = None
        self._sigma: Dict[str, SigmaTable] = {}
        self._shift: Optional[dict] = None
        cfg_path = self.root / "config.json"
        if cfg_path.exists():
            old = json.loads(cfg_path.read_text())
            if old != json.loads(json.dumps(cfg.to_json())):
                raise ValueError(f"{self.root} holds artifacts for a different configuration")
        else:
            cfg.save(cfg_path)

    # -- episodes
    def batch(self, purpose: str, env, n: Optional[int] = None) -> EpisodeBatch:
        d = self.cfg.data
        default = {"diff-train": d.train_episodes, "diff-val": d.val_episodes,
                   "base-sigma": d.base_sigma_episodes, "base-calib": d.base_calib_episodes,
                   "test": self.cfg.run.episodes}
        n = default[purpose] if n is None else n
        key = (purpose, env)
        b = self._batches.get(key)
        if b is not None and len(b) >= n:
            return b if len(b) == n else EpisodeBatch(b.Y[:n], b.eta[:n])
        path = self.root / "data" / f"{purpose}_{env}.npz"
        if path.exists():
            z = np.load(path)
            if len(z["eta"]) >= n:
                b = EpisodeBatch(z["Y"], z["eta"])
        if b is None or len(b) < n:
            t0 = time.perf_counter()
            b = generate(self.cfg, purpose, env, n)
            np.savez_compressed(path, Y=b.Y, eta=b.eta)
            log.info("simulated %d %s episodes in env %s (%.1fs)", n, purpose, env, time.perf_counter() - t0)
        self._batches[key] = b
        return b if len(b) == n else EpisodeBatch(b.Y[:n], b.eta[:n])

    def gen_data(self) -> None:
        for env in self.cfg.data.seen_envs:
            self.batch("diff-train", env)
            self.batch("diff-val", env)
        self.batch("base-sigma", "train")
        self.batch("base-calib", "train")

    # -- normalizers
    def sigma(self, which: str, H: Optional[int] = None) -> SigmaTable:
        """``syn`` fits on the diffusion training envs, ``base`` on the training env."""
        s = self.cfg.sim
        H = s.H if H is None else H
        key = f"{which}-{H}"
        if key in self._sigma:
            return self._sigma[key]
        path = self.root / f"sigma_{key}.json"
        if path.exists():
            tab = SigmaTable.from_json(json.loads(path.read_text()))
        else:
            if which == "syn":
                errs = [e for env in self.cfg.data.seen_envs for e in self.batch("diff-train", env).errors(H, s.dt)]
            elif which == "base":
                errs = list(self.batch("base-sigma", "train").errors(H, s.dt))
            else:
                raise ValueError(f"unknown sigma table {which!r}")
            tab = fit_sigma([PredictionErrorTensor(e) for e in errs])
            path.write_text(json.dumps(tab.to_json()))
        self._sigma[key] = tab
        return tab

    # -- diffusion
    @property
    def model_path(self) -> Path:
        return self.root / "model.json"

    def model(self) -> dm.DiffusionModel:
        if self._model is None:
            if self.model_path.exists():
                self._model = dm.DiffusionModel.load(self.model_path)
            else:
                self._model = self.train_diffusion()
        return self._model

    def train_diffusion(self) -> dm.DiffusionModel:
        s = self.cfg.sim
        parts = [training_rows(self.batch("diff-train", env), s.H, s.dt) for env in self.cfg.data.seen_envs]
        C = np.concatenate([p[0] for p in parts])
        y = np.concatenate([p[1] for p in parts])
        t0 = time.perf_counter()
        log.info("training diffusion model on %d rows", len(y))
        model = dm.fit(self.cfg.diffusion, C, y)
        model.train_meta["train_seconds"] = time.perf_counter() - t0
        model.save(self.model_path)
        self._model = model
        return model

    # -- held-out tables for the shift estimates
    def shift_tables(self) -> dict:
        """Per seen env: mean nuisance, real validation scores and held-out noise MSE."""
        if self._shift is not None:
            return self._shift
        path = self.root / "shift_tables.json"
        if path.exists():
            raw = json.loads(path.read_text())
            self._shift = {int(k): {"eta": v["eta"], "scores": np.array(v["scores"]), "E": np.array(v["E"]),
                                    "rows": v["rows"]} for k, v in raw.items()}
            return self._shift
        s, model, sig = self.cfg.sim, self.model(), self.sigma("syn")
        out = {}
        for env in self.cfg.data.seen_envs:
            b = self.batch("diff-val", env)
            scores = np.array([episode_score_from(e, sig) for e in b.errors(s.H, s.dt)])
            C, y = training_rows(b, s.H, s.dt)
            E = dm.noise_mse_per_step(model, C, y, seed=[self.cfg.seed, PURPOSE["noise-mse"], env])
            out[env] = {"eta": float(b.eta.mean()), "scores": scores, "E": E, "rows": int(len(y))}
        path.write_text(json.dumps({str(k): {"eta": v["eta"], "scores": v["scores"].tolist(),
                                             "E": v["E"].tolist(), "rows": v["rows"]} for k, v in out.items()}))
        self._shift = out
        return out


def episode_score_from(errors: np.ndarray, sigma: SigmaTable) -> float:
    return episode_score(PredictionErrorTensor(errors), sigma)


# ---------------------------------------------------------------- calibration per case

class CalibrationSource(enum.Enum):
    REAL_TRAIN_ENV = "RealTrainEnv"
    SYNTHETIC = "Synthetic"


@dataclass(frozen=True)
class CaseSpec:
    case_id: int
    loop: str = "closed"

    def __post_init__(self):
        if self.case_id not in (0, 1, 2, 3):
            raise ValueError("case must be 0, 1, 2 or 3")
        if self.loop not in ("open", "closed"):
            raise ValueError("loop must be 'open' or 'closed'")

    @property
    def calibration_source(self) -> CalibrationSource:
        return CalibrationSource.REAL_TRAIN_ENV if self.case_id == 0 else CalibrationSource.SYNTHETIC

    @property
    def shift_kind(self) -> Optional[ShiftKind]:
        return {2: ShiftKind.EMPIRICAL_WINF, 3: ShiftKind.ANALYTIC_W2_BOUND}.get(self.case_id)


@dataclass
class Calibration:
    quantile: QuantileResult
    sigma: SigmaTable
    r: float
    gen_ms: float  # synthetic generation time spent for this episode (0 when cached)
    sigma_long: Optional[SigmaTable] = None  # full-horizon normalizers for open-loop plans

    @property
    def scale(self) -> float:
        q = self.quantile
        return math.inf if q.infinite else q.c_nominal + q.delta_correction


class Calibrator:
    """Builds the calibration quantile of each case for an observed nuisance value."""

    def __init__(self, ws: Workspace, K: Optional[int] = None):
        self.ws = ws
        self.cfg = ws.cfg
        self.K = self.cfg.calib.K if K is None else K
        self._syn: Dict[int, ScoreSet] = {}
        self._bound: Dict[tuple, ShiftEstimate] = {}
        self._base: Optional[ScoreSet] = None

    def bin_of(self, eta: float) -> int:
        return int(math.floor(eta / self.cfg.calib.eta_bin))

    def bin_center(self, b: int) -> float:
        return (b + 0.5) * self.cfg.calib.eta_bin

    def base_scores(self) -> ScoreSet:
        if self._base is None:
            s = self.cfg.sim
            sig = self.ws.sigma("base")
            b = self.ws.batch("base-calib", "train")
            self._base = ScoreSet(np.array([episode_score_from(e, sig) for e in b.errors(s.H, s.dt)]),
                                  Provenance.REAL, "train")
        return self._base

    def synthetic(self, eta: float) -> Tuple[ScoreSet, float]:
        """Synthetic score set for the nuisance bin of ``eta`` and the time spent building it."""
        b = self.bin_of(eta)
        if b in self._syn:
            return self._syn[b], 0.0
        s = self.cfg.sim
        t0 = time.perf_counter()
        seed = np.random.SeedSequence([self.cfg.seed, PURPOSE["synthetic"], self.K, b + 1_000_000])
        ss = build_synthetic_scoreset(self.ws.model(), self.bin_center(b), s.T, s.H,
                                      len(environment(1).starts), self.ws.sigma("syn"), self.K, seed)
        ms = 1e3 * (time.perf_counter() - t0)
        self._syn[b] = ss
        return ss, ms

    def nearest(self, eta: float) -> Tuple[int, ...]:
        tables = self.ws.shift_tables()
        keys = list(tables)
        etas = {k: tables[k]["eta"] for k in keys}
        return tuple(sorted(nearest_contexts(keys, eta, self.cfg.calib.n_nearest, lambda a, c: abs(etas[a] - c))))

    def aggregated_scores(self, eta: float) -> ScoreSet:
        tables = self.ws.shift_tables()
        chosen = self.nearest(eta)
        return ScoreSet(np.concatenate([tables[k]["scores"] for k in chosen]), Provenance.REAL, chosen)

    def analytic_bound(self, eta: float) -> ShiftEstimate:
        """Transport bound in raw error units for the seen contexts nearest ``eta``."""
        chosen = self.nearest(eta)
        if chosen in self._bound:
            return self._bound[chosen]
        ws, s = self.ws, self.cfg.sim
        model = ws.model()
        tables = ws.shift_tables()
        rows = np.array([tables[k]["rows"] for k in chosen], dtype=float)
        E = np.sum([tables[k]["E"] * w for k, w in zip(chosen, rows)], axis=0) / rows.sum()
        C, y = [], []
        rng = np.random.default_rng([self.cfg.seed, PURPOSE["l2"], *chosen])
        for k in chosen:
            Ck, yk = training_rows(ws.batch("diff-val", k), s.H, s.dt)
            pick = rng.choice(len(yk), size=min(len(yk), 4096), replace=False)
            C.append(Ck[pick])
            y.append(yk[pick])
        C, y = np.concatenate(C), np.concatenate(y)
        L2 = estimate_L2(model, C, self.cfg.calib.l2_pairs, [self.cfg.seed, PURPOSE["l2"], *chosen],
                         s0=model.to_model_units(y))
        ing = build_ingredients(model.schedule, E, L2)
        est = analytic_w2_bound(ing, model.schedule, chosen)
        scale = model.y_scale if model.y_scale > 0 else 1.0
        raw = ShiftEstimate(ShiftKind.ANALYTIC_W2_BOUND, est.value * scale, (int(rows.sum()), 0), chosen)
        (ws.root / f"bound_{'-'.join(map(str, chosen))}.csv").write_text(ing.to_csv(model.schedule))
        self._bound[chosen] = raw
        return raw

    def calibrate(self, case: CaseSpec, eta: float) -> Calibration:
        delta = self.cfg.calib.delta
        if case.case_id == 0:
            q = robust_quantile(self.base_scores(), delta, AmbiguitySpec())
            return Calibration(q, self.ws.sigma("base"), 0.0, 0.0)
        syn, ms = self.synthetic(eta)
        sig = self.ws.sigma("syn")
        if case.case_id == 1:
            return Calibration(robust_quantile(syn, delta, AmbiguitySpec()), sig, 0.0, ms)
        if case.case_id == 2:
            r = wasserstein_inf_1d(self.aggregated_scores(eta), syn)
        else:
            bound = self.analytic_bound(eta)
            r = math.inf if bound.unbounded else propagate_to_radius(bound.value, sig)
        if math.isinf(r):
            q = QuantileResult(math.inf, math.inf, math.inf, math.inf, True)
        else:
            q = robust_quantile(syn, delta, AmbiguitySpec(AmbiguityKind.LP, eps_lp=r, rho_lp=self.cfg.calib.rho_lp))
        return Calibration(q, sig, r, ms)


# ---------------------------------------------------------------- episodes

def _apply(x: np.ndarray, u: np.ndarray, cfg) -> np.ndarray:
    s = ego_step(EgoState.from_array(x), EgoInput(float(u[0]), float(u[1])), cfg.dt, cfg.wheelbase,
                 cfg.v_min, cfg.v_max)
    return s.as_array()


def run_episode(Y: np.ndarray, eta: float, cal: Calibration, cfg: ExperimentConfig, loop: str = "closed",
                env="?", case: int = -1, seed: int = 0) -> EpisodeTrace:
    """Drive the ego through one obstacle trajectory and score coverage and safety."""
    s, pc = cfg.sim, cfg.planner
    T, N = Y.shape[0] - 1, Y.shape[1]
    goal = np.asarray(s.ego_goal, dtype=float)
    scale = cal.scale
    errs = prediction_errors(Y, s.dt, s.H).entries
    score = episode_score_from(errs, cal.sigma)
    covered = bool(score <= scale)

    x = np.asarray(s.ego_start, dtype=float)
    states, inputs, step_ms, statuses = [x], [], [], []
    used_fallback = infeasible = False
    warm: Optional[MPCSolution] = None
    plan: Optional[np.ndarray] = None
    if loop == "closed":
        P = predict_all(Y, s.dt, s.H, DEFAULT_WINDOW)
    else:
        P = predict_all(Y, s.dt, T - s.T_b, DEFAULT_WINDOW)
    for t in range(T):
        if t < s.T_b:
            u = np.zeros(2)
        elif loop == "closed" or plan is None:
            H = s.H if loop == "closed" else T - s.T_b
            sig = cal.sigma if loop == "closed" else cal.sigma_long
            radii = sig.sigma[:H, :N] * scale if math.isfinite(scale) else np.full((H, N), math.inf)
            prob = MPCProblem(x, P[t - 1, :H], radii, goal, s)
            sol = solve(prob, warm, pc)
            step_ms.append(sol.solve_ms)
            statuses.append(sol.status.value)
            if sol.status is Status.INFEASIBLE:
                infeasible = used_fallback = True
                sol = fallback(prob)
                warm = None
            else:
                warm = sol
            plan = sol.inputs
            u = plan[0]
        else:
            u = plan[t - s.T_b]
        x = _apply(x, u, s)
        states.append(x)
        inputs.append(u)
    states = np.array(states)
    margins = [check_collision(states[k], Y[k], s.eps)[1] for k in range(1, T + 1)]
    min_margin = float(min(margins))
    return EpisodeTrace(str(env), case, loop, seed, float(eta), states, np.array(inputs), Y, float(scale),
                        min_margin < 0.0, covered, used_fallback, infeasible, min_margin,
                        np.array(step_ms), float(score), float(cal.r), statuses)


@dataclass
class CaseResult:
    env: object
    case: int
    loop: str
    traces: List[EpisodeTrace]
    gen_ms: List[float]
    failures: List[str] = field(default_factory=list)

    def row(self) -> dict:
        tr = self.traces
        n = len(tr) + len(self.failures)
        ms = np.concatenate([t.step_ms for t in tr]) if tr else np.zeros(0)
        return {
            "env": self.env, "case": self.case, "loop": self.loop, "n": n,
            "coverage": float(np.mean([t.coverage for t in tr])) if tr else math.nan,
            "safety": float(np.mean([not t.collision for t in tr])) if tr else math.nan,
            "infeasible": float(np.mean([t.infeasible for t in tr])) if tr else math.nan,
            "mean_ms": float(ms.mean()) if ms.size else math.nan,
            "p95_ms": float(np.percentile(ms, 95)) if ms.size else math.nan,
            "r_used": float(np.mean([t.r_used for t in tr])) if tr else math.nan,
            "failed": len(self.failures),
        }


def run_case(ws: Workspace, case: CaseSpec, env, episodes: Optional[int] = None,
             calibrator: Optional[Calibrator] = None) -> CaseResult:
    """Calibrate and roll out ``episodes`` test episodes of ``env`` under one case.

    An episode that raises is reported in ``failures`` rather than dropped.
    """
    cfg = ws.cfg
    cal_src = calibrator or Calibrator(ws)
    batch = ws.batch("test", env, episodes)
    traces, gen, failures = [], [], []
    if case.loop == "open":
        long_sigma = ws.sigma("base" if case.case_id == 0 else "syn", cfg.sim.T - 1)
    for k in range(len(batch)):
        try:
            cal = cal_src.calibrate(case, float(batch.eta[k]))
            if case.loop == "open":
                cal.sigma_long = long_sigma
            traces.append(run_episode(batch.Y[k], batch.eta[k], cal, cfg, case.loop, env, case.case_id, k))
            gen.append(cal.gen_ms)
        except Exception as exc:  # reported, never silently dropped
            log.exception("episode %d of env %s case %d failed", k, env, case.case_id)
            failures.append(f"{k}: {type(exc).__name__}: {exc}")
    return CaseResult(env, case.case_id, case.loop, traces, gen, failures)


def collision_consistency(traces: Sequence[EpisodeTrace]) -> List[EpisodeTrace]:
    """Collision episodes that had coverage and never fell back; should be empty."""
    return [t for t in traces if t.collision and t.coverage and not t.fallback]


# ---------------------------------------------------------------- nuisance sweep

def w2_vs_nuisance_sweep(model: dm.DiffusionModel, test_errors: np.ndarray, eta_grid: Sequence[float],
                         t_fixed: int, tau_set: Sequence[int], n: int, seed) -> List[dict]:
    """W2 between synthetic draws at ``(eta, t_fixed, tau)`` and pooled test errors.

    ``test_errors`` is (episodes, T-1, H, N); obstacles are pooled, with the
    synthetic draws split evenly across them.
    """
    N = test_errors.shape[3]
    rows = []
    rng = np.random.default_rng(seed)
    for eta in eta_grid:
        for tau in tau_set:
            test = test_errors[:, t_fixed - 1, tau - 1, :].ravel()
            test = test[~np.isnan(test)]
            C = np.array([[eta, t_fixed, tau, i] for i in range(N) for _ in range(n // N)], dtype=float)
            syn = np.maximum(model.sample_contexts(C, rng), 0.0)
            rows.append({"eta": float(eta), "tau": int(tau), "w2": wasserstein2_1d(syn, test),
                         "n_syn": len(syn), "n_test": len(test)})
    return rows


def sweep_argmin(rows: List[dict]) -> float:
    """Grid value minimizing the mean W2 across horizons."""
    etas = sorted({r["eta"] for r in rows})
    prof = [np.mean([r["w2"] for r in rows if r["eta"] == e]) for e in etas]
    return etas[int(np.argmin(prof))]


def nuisance_sweep(ws: Workspace) -> Tuple[List[dict], List[dict]]:
    """Sweep every configured held-out env; returns all rows and one summary per env."""
    sw, s = ws.cfg.sweep, ws.cfg.sim
    step = float(np.min(np.diff(sorted(sw.eta_grid))))
    rows, summary = [], []
    for env in sw.envs:
        b = ws.batch("test", env, sw.test_episodes)
        env_rows = w2_vs_nuisance_sweep(ws.model(), b.errors(s.H, s.dt), sw.eta_grid, sw.t_fixed, sw.tau_set,
                                        sw.n, [ws.cfg.seed, PURPOSE["sweep"], env])
        eta_j = float(b.eta.mean())
        best = sweep_argmin(env_rows)
        summary.append({"env": env, "eta_j": eta_j, "argmin": best, "hit": abs(best - eta_j) <= step + 1e-12})
        rows += [{"env": env, "eta_j": eta_j, **r} for r in env_rows]
    return rows, summary


# ---------------------------------------------------------------- timing

def synthetic_generation_ms(ws: Workspace, K: int, etas: Sequence[float]) -> np.ndarray:
    """Wall time of building a fresh ``K``-score synthetic set at each nuisance value."""
    s = ws.cfg.sim
    model, sig = ws.model(), ws.sigma("syn")
    out = []
    for k, eta in enumerate(etas):
        t0 = time.perf_counter()
        build_synthetic_scoreset(model, float(eta), s.T, s.H, len(environment(1).starts), sig, K,
                                 [ws.cfg.seed, PURPOSE["synthetic"], K, k])
        out.append(1e3 * (time.perf_counter() - t0))
    return np.array(out)


def per_step_timing(solve_ms: Sequence[np.ndarray], gen_ms: float) -> dict:
    """Per-step wall clock with one synthetic set built per episode.

    ``amortized`` spreads the build over the episode's planning steps;
    ``unamortized`` charges the full build to every step.
    """
    amort = np.concatenate([np.asarray(m) + gen_ms / max(len(m), 1) for m in solve_ms if len(m)])
    mpc = np.concatenate([np.asarray(m) for m in solve_ms if len(m)])
    return {"mpc_mean_ms": float(mpc.mean()), "mpc_p95_ms": float(np.percentile(mpc, 95)),
            "gen_ms": float(gen_ms),
            "amortized_mean_ms": float(amort.mean()), "amortized_p95_ms": float(np.percentile(amort, 95)),
            "unamortized_mean_ms": float(mpc.mean() + gen_ms),
            "unamortized_p95_ms": float(np.percentile(mpc, 95) + gen_ms)}
