"""Distances between score distributions and the diffusion-error bound."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Dict, Hashable, Optional, Tuple

import numpy as np

from .conformal import ScoreSet
from .diffusion import DiffusionModel, VarianceSchedule, forward_sample
from .scores import SigmaTable

EXP_GUARD = 700.0


class ShiftKind(enum.Enum):
    EMPIRICAL_WINF = "EmpiricalWInf"
    EMPIRICAL_W2 = "EmpiricalW2"
    ANALYTIC_W2_BOUND = "AnalyticW2Bound"


@dataclass(frozen=True)
class ShiftEstimate:
    kind: ShiftKind
    value: float
    sample_sizes: Tuple[int, int] = (0, 0)
    context_id: Optional[object] = None

    def __post_init__(self):
        if not self.value >= 0:
            raise ValueError("shift estimates are nonnegative")

    @property
    def unbounded(self) -> bool:
        return math.isinf(self.value)

    def to_json(self) -> dict:
        return {"kind": self.kind.value, "value": None if self.unbounded else self.value,
                "sample_sizes": list(self.sample_sizes), "context_id": self.context_id}


def _values(x) -> np.ndarray:
    return x.scores if isinstance(x, ScoreSet) else np.sort(np.asarray(x, dtype=float).ravel())


def _matched_quantiles(a, b):
    """Quantile functions of both empirical laws on their merged probability grid."""
    xa, xb = _values(a), _values(b)
    n, m = xa.size, xb.size
    if n == 0 or m == 0:
        raise ValueError("empty sample")
    if n == m:
        return xa, xb, np.full(n, 1.0 / n)
    # breakpoints k/n and l/m merged; exact rational comparison via integer cross-multiples
    grid = np.union1d(np.arange(1, n + 1) * m, np.arange(1, m + 1) * n)  # in units of 1/(n m)
    lo = np.concatenate([[0], grid[:-1]])
    ia = (lo // m).astype(int)  # interval (lo, grid] lies in quantile cell ceil(u n) - 1
    ib = (lo // n).astype(int)
    w = (grid - lo) / float(n * m)
    return xa[ia], xb[ib], w


def wasserstein2_1d(a, b) -> float:
    qa, qb, w = _matched_quantiles(a, b)
    return float(math.sqrt(max(0.0, float(np.sum(w * (qa - qb) ** 2)))))


def wasserstein_inf_1d(a, b) -> float:
    qa, qb, w = _matched_quantiles(a, b)
    return float(np.max(np.abs(qa - qb)[w > 0]))


# ---------------------------------------------------------------- analytic bound

@dataclass(frozen=True)
class BoundIngredients:
    E: np.ndarray
    H: np.ndarray
    L1: np.ndarray
    L2: np.ndarray
    M: np.ndarray
    residual_term: float

    def to_json(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}

    def to_csv(self, schedule: VarianceSchedule) -> str:
        rows = ["j,beta,E,H,L1,L2,M"]
        for j in range(self.E.size):
            rows.append(f"{j + 1},{schedule.betas[j]!r},{self.E[j]!r},{self.H[j]!r},"
                        f"{self.L1[j]!r},{self.L2[j]!r},{self.M[j]!r}")
        return "\n".join(rows) + "\n"


def _log_growth(schedule: VarianceSchedule, L1: np.ndarray, L2: np.ndarray) -> np.ndarray:
    return np.cumsum(L1 + L2 * schedule.betas)


def build_ingredients(schedule: VarianceSchedule, E, L2) -> BoundIngredients:
    """Per-step ingredient tables from held-out noise MSE ``E`` and estimated ``L2``."""
    E = np.asarray(E, dtype=float)
    L2 = np.asarray(L2, dtype=float)
    if E.shape != schedule.betas.shape or L2.shape != schedule.betas.shape:
        raise ValueError("E and L2 need one entry per diffusion step")
    if np.any(E < 0):
        raise ValueError("E must be nonnegative")
    H = E / (1.0 - schedule.alpha_bars)
    L1 = schedule.betas ** 2 / 4.0
    expo = _log_growth(schedule, L1, L2)
    with np.errstate(over="ignore"):
        M = np.where(expo > EXP_GUARD, np.inf, np.exp(np.minimum(expo, EXP_GUARD)))
    resid = float(np.sum(schedule.betas ** 2 * M))
    return BoundIngredients(E, H, L1, L2, M, math.sqrt(resid) if math.isfinite(resid) else math.inf)


def analytic_w2_bound(ing: BoundIngredients, schedule: VarianceSchedule, context_id=None) -> ShiftEstimate:
    """Score-error term plus discretization residual; unbounded if any exponent overflows."""
    if not np.all(np.isfinite(ing.M)):
        return ShiftEstimate(ShiftKind.ANALYTIC_W2_BOUND, math.inf, context_id=context_id)
    first = float(np.sum(schedule.betas * ing.M * np.sqrt(ing.H)))
    return ShiftEstimate(ShiftKind.ANALYTIC_W2_BOUND, first + ing.residual_term, context_id=context_id)


def propagate_to_radius(w2_bound: float, sigma: SigmaTable) -> float:
    """Score-space radius for a raw-error transport bound."""
    return w2_bound / sigma.sigma_min


def _streams(seed, T: int):
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [[np.random.default_rng(s) for s in child.spawn(4)] for child in root.spawn(T)]


def estimate_L2(model: DiffusionModel, c, pairs_per_step: int, seed, s0=None) -> np.ndarray:
    """Largest one-sided score-difference ratio per step over sampled pairs.

    ``c`` holds one or more raw contexts; each pair picks one of them.  Pairs
    come from the forward marginal started at ``s0`` (model units, one per
    context) or at the encoder mean when ``s0`` is None.  Draw streams are
    prefix-stable, so more pairs never lower the estimate.
    """
    C = np.atleast_2d(np.asarray(c, dtype=float))
    f = model.encode(C)
    base = f if s0 is None else np.asarray(s0, dtype=float).ravel()
    c_std = model.std_context(C)
    T = model.schedule.T_diff
    out = np.full(T, -np.inf)
    for j, (r_idx, r_a, r_b, _) in zip(range(1, T + 1), _streams(seed, T)):
        idx = r_idx.integers(0, C.shape[0], size=pairs_per_step)
        sa = forward_sample(model.schedule, base[idx], f[idx], j, r_a.standard_normal(pairs_per_step))
        sb = forward_sample(model.schedule, base[idx], f[idx], j, r_b.standard_normal(pairs_per_step))
        diff = sa - sb
        keep = np.abs(diff) > 1e-12
        if not np.any(keep):
            continue
        ga = model.score(sa[keep], j, f[idx][keep], c_std[idx][keep])
        gb = model.score(sb[keep], j, f[idx][keep], c_std[idx][keep])
        out[j - 1] = float(np.max((ga - gb) / diff[keep]))
    out[~np.isfinite(out)] = 0.0
    return out


# ---------------------------------------------------------------- unseen contexts

def nearest_contexts(keys, c_star: float, I: int, metric: Optional[Callable] = None):
    keys = list(keys)
    if I > len(keys):
        raise ValueError(f"I={I} exceeds the {len(keys)} seen contexts")
    metric = metric or (lambda a, b: abs(float(a) - float(b)))
    order = sorted(range(len(keys)), key=lambda k: (metric(keys[k], c_star), k))
    return [keys[k] for k in order[:I]]


def aggregate_unseen_context(datasets: Dict[Hashable, ScoreSet], c_star, I: int,
                             metric_on_context: Optional[Callable] = None) -> ScoreSet:
    """Union of the score sets of the ``I`` seen contexts closest to ``c_star``."""
    chosen = nearest_contexts(datasets.keys(), c_star, I, metric_on_context)
    vals = np.concatenate([datasets[k].scores for k in chosen])
    first = datasets[chosen[0]]
    return ScoreSet(vals, first.provenance, c_star)
