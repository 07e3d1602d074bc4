"""Vanilla and robust conformal quantiles over scalar score sets.

All quantiles use the right-continuous empirical inverse CDF:
``Quantile_p(R_1..R_K)`` is the ``ceil(K p)``-th smallest score.  Levels above
one produce an ``infinite`` result instead of clamping to the largest score.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

LEVEL_TOL = 1e-9
MAX_BISECT = 200


class Provenance(enum.Enum):
    REAL = "RealCalibration"
    SYNTHETIC = "Synthetic"


class AmbiguityKind(enum.Enum):
    NONE = "None"
    FDIV_TV = "FDivTV"
    FDIV_GENERIC = "FDivGeneric"
    LP = "LevyProkhorov"


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class ScoreSet:
    """Sorted multiset of nonnegative nonconformity scores."""

    scores: np.ndarray
    provenance: Provenance = Provenance.REAL
    context_id: Optional[object] = None

    def __post_init__(self):
        arr = np.sort(np.asarray(self.scores, dtype=float).ravel())
        if arr.size == 0:
            raise ValueError("score set must be nonempty")
        if not np.all(np.isfinite(arr)) or arr[0] < 0:
            raise ValueError("scores must be finite and nonnegative")
        arr.setflags(write=False)
        object.__setattr__(self, "scores", arr)

    def __len__(self) -> int:
        return self.scores.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, ScoreSet):
            return NotImplemented
        return (self.provenance is other.provenance and self.context_id == other.context_id
                and np.array_equal(self.scores, other.scores))

    __hash__ = None

    @property
    def K(self) -> int:
        return self.scores.size

    def union(self, other: "ScoreSet", context_id=None) -> "ScoreSet":
        return ScoreSet(np.concatenate([self.scores, other.scores]),
                        self.provenance, context_id)

    def to_text(self) -> str:
        return "".join(f"{s!r}\n" for s in self.scores.tolist())

    @classmethod
    def from_text(cls, text: str, provenance=Provenance.REAL, context_id=None) -> "ScoreSet":
        vals = [float(line) for line in text.splitlines() if line.strip()]
        return cls(np.array(vals), provenance, context_id)

    def to_json(self) -> dict:
        return {"scores": self.scores.tolist(), "provenance": self.provenance.value,
                "context_id": self.context_id}

    @classmethod
    def from_json(cls, d: dict) -> "ScoreSet":
        return cls(np.asarray(d["scores"], dtype=float),
                   Provenance(d.get("provenance", Provenance.REAL.value)),
                   d.get("context_id"))


@dataclass(frozen=True)
class AmbiguitySpec:
    kind: AmbiguityKind = AmbiguityKind.NONE
    r: float = 0.0
    eps_lp: float = 0.0
    rho_lp: float = 0.0
    f_generator: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, compare=False)

    def __post_init__(self):
        if self.r < 0 or self.eps_lp < 0 or self.rho_lp < 0:
            raise ValueError("ambiguity radii must be nonnegative")
        if self.rho_lp >= 1:
            raise ValueError("rho_lp must be < 1")
        if self.kind is AmbiguityKind.FDIV_GENERIC and self.f_generator is None:
            raise ValueError("FDivGeneric needs an f_generator")


@dataclass(frozen=True)
class QuantileResult:
    c_nominal: float
    c_robust: float
    delta_correction: float
    effective_level: float
    infinite: bool

    def to_json(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isinf(v) else v)
                for k, v in self.__dict__.items()}


def _check_delta(delta: float) -> None:
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")


def order_index(K: int, level: float) -> Optional[int]:
    """1-based order statistic index ``ceil(K level)``; None if level > 1."""
    if level > 1.0 + LEVEL_TOL:
        return None
    idx = math.ceil(K * level - LEVEL_TOL)
    return min(max(idx, 1), K)


def empirical_quantile(scores: ScoreSet, level: float) -> float:
    idx = order_index(scores.K, level)
    return math.inf if idx is None else float(scores.scores[idx - 1])


def _vanilla_level(K: int, delta: float) -> float:
    return (1.0 + 1.0 / K) * (1.0 - delta)


def vanilla_quantile(scores: ScoreSet, delta: float) -> QuantileResult:
    _check_delta(delta)
    level = _vanilla_level(scores.K, delta)
    c = empirical_quantile(scores, level)
    inf = math.isinf(c)
    return QuantileResult(c, c, 0.0 if not inf else math.inf, level, inf)


def _pack(scores: ScoreSet, delta: float, c_rob: float, level: float) -> QuantileResult:
    c_nom = empirical_quantile(scores, _vanilla_level(scores.K, delta))
    inf = math.isinf(c_rob)
    corr = math.inf if inf or math.isinf(c_nom) else c_rob - c_nom
    return QuantileResult(c_nom, c_rob, corr, level, inf)


def _fdiv_levels(K: int, delta: float, g, g_inv) -> Optional[float]:
    """Adjusted coverage level ``1 - delta_tilde``; None when a level leaves [0, 1]."""
    inner = (1.0 + 1.0 / K) * g_inv(1.0 - delta)
    if inner > 1.0 + LEVEL_TOL:
        return None
    delta_k = 1.0 - g(min(inner, 1.0))
    level = g_inv(1.0 - delta_k)
    if level > 1.0 + LEVEL_TOL:
        return None
    return level


def robust_quantile_fdiv_tv(scores: ScoreSet, delta: float, r: float) -> QuantileResult:
    """Total-variation ball: ``g(b) = max(0, b - r)``, ``g^-1(t) = min(1, t + r)``."""
    _check_delta(delta)
    if r < 0:
        raise ValueError("r must be nonnegative")
    level = _fdiv_levels(scores.K, delta,
                         lambda b: max(0.0, b - r),
                         lambda t: min(1.0, t + r))
    if level is None:
        return _pack(scores, delta, math.inf, math.inf)
    return _pack(scores, delta, empirical_quantile(scores, level), level)


def tv_generator(u):
    return 0.5 * np.abs(np.asarray(u, dtype=float) - 1.0)


def kl_generator(u):
    u = np.asarray(u, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(u > 0, u * np.log(np.where(u > 0, u, 1.0)), 0.0)
    return out


def _recession(f) -> float:
    """``lim_{u->inf} f(u)/u``, used for the perspective at zero mass."""
    big = 1e12
    return float(f(np.array([big]))[0] / big)


def _perspective(f, w: float, a: float, f_inf: float) -> float:
    if w > 0:
        return w * float(f(np.array([a / w]))[0])
    return a * f_inf if a > 0 else 0.0


class FDivergenceLevels:
    """Numerical ``g`` and ``g^-1`` for a convex generator by bisection."""

    def __init__(self, f, r: float, tol: float = LEVEL_TOL, max_iter: int = MAX_BISECT):
        if r < 0:
            raise ValueError("r must be nonnegative")
        self.f, self.r, self.tol, self.max_iter = f, r, tol, max_iter
        self.f_inf = _recession(f)

    def phi(self, beta: float, z: float) -> float:
        return (_perspective(self.f, beta, z, self.f_inf)
                + _perspective(self.f, 1.0 - beta, 1.0 - z, self.f_inf))

    def _bisect(self, lo: float, hi: float, pred, tol: float) -> float:
        # pred(lo) is False and pred(hi) is True; returns the midpoint of the final bracket
        for _ in range(self.max_iter):
            if hi - lo <= tol:
                return 0.5 * (lo + hi)
            mid = 0.5 * (lo + hi)
            if pred(mid):
                hi = mid
            else:
                lo = mid
        if hi - lo > tol:
            raise ConvergenceError(f"bisection did not reach tol {tol}: bracket {hi - lo}")
        return 0.5 * (lo + hi)

    def g(self, beta: float) -> float:
        if not -LEVEL_TOL <= beta <= 1.0 + LEVEL_TOL:
            raise ValueError("g is defined on [0, 1]")
        beta = min(max(beta, 0.0), 1.0)
        if self.phi(beta, 0.0) <= self.r:
            return 0.0
        # phi(beta, .) is convex with minimum 0 at z = beta, so the feasible set is an interval
        return self._bisect(0.0, beta, lambda z: self.phi(beta, z) <= self.r, 1e-2 * self.tol)

    def g_inv(self, tau: float) -> float:
        tau = min(max(tau, 0.0), 1.0)
        if self.g(1.0) <= tau:
            return 1.0
        # g(beta) <= beta, so beta = tau is always feasible
        return self._bisect(tau, 1.0, lambda b: self.g(b) > tau, 0.5 * self.tol)


def robust_quantile_fdiv_generic(scores: ScoreSet, delta: float, r: float, f_generator) -> QuantileResult:
    _check_delta(delta)
    lv = FDivergenceLevels(f_generator, r)
    level = _fdiv_levels(scores.K, delta, lv.g, lv.g_inv)
    if level is None:
        return _pack(scores, delta, math.inf, math.inf)
    return _pack(scores, delta, empirical_quantile(scores, level), level)


def lp_level(K: int, delta: float, rho: float) -> float:
    beta = delta + (delta - rho - 2.0) / K
    return 1.0 - beta + rho


def robust_quantile_lp(scores: ScoreSet, delta: float, eps_lp: float, rho_lp: float) -> QuantileResult:
    """Levy-Prokhorov ball: quantile at ``1 - beta + rho`` shifted up by ``eps_lp``."""
    _check_delta(delta)
    if eps_lp < 0 or rho_lp < 0:
        raise ValueError("LP radii must be nonnegative")
    level = lp_level(scores.K, delta, rho_lp)
    q = empirical_quantile(scores, level)
    return _pack(scores, delta, q + eps_lp, level)


def robust_quantile(scores: ScoreSet, delta: float, spec: AmbiguitySpec) -> QuantileResult:
    if spec.kind is AmbiguityKind.NONE:
        return vanilla_quantile(scores, delta)
    if spec.kind is AmbiguityKind.FDIV_TV:
        return robust_quantile_fdiv_tv(scores, delta, spec.r)
    if spec.kind is AmbiguityKind.FDIV_GENERIC:
        return robust_quantile_fdiv_generic(scores, delta, spec.r, spec.f_generator)
    return robust_quantile_lp(scores, delta, spec.eps_lp, spec.rho_lp)


def scores_from_iterable(values: Iterable[float], provenance=Provenance.REAL, context_id=None) -> ScoreSet:
    return ScoreSet(np.fromiter(values, dtype=float), provenance, context_id)
