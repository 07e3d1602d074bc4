"""Episode nonconformity scores, normalization tables and region radii."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .conformal import Provenance, QuantileResult, ScoreSet
from .predictor import DEFAULT_WINDOW, predict_all

SIGMA_FLOOR = 1e-3


class UnboundedRegion(ValueError):
    """Raised when a quantile is infinite, so no finite region exists."""


@dataclass(frozen=True)
class PredictionErrorTensor:
    """Errors ``entries[t-1, h-1, i]`` of the ``h``-step prediction made at ``t``.

    Entries with ``t + h > T`` are NaN and excluded from every reduction.
    """

    entries: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=float)
        if e.ndim != 3:
            raise ValueError("entries must have shape (T-1, H, N)")
        valid = e[~np.isnan(e)]
        if not np.all(np.isfinite(valid)) or np.any(valid < 0):
            raise ValueError("errors must be finite and nonnegative")
        object.__setattr__(self, "entries", e)

    @property
    def T(self) -> int:
        return self.entries.shape[0] + 1

    @property
    def H(self) -> int:
        return self.entries.shape[1]

    @property
    def N(self) -> int:
        return self.entries.shape[2]

    def truncated(self, H: int) -> "PredictionErrorTensor":
        return PredictionErrorTensor(self.entries[:, :H])

    def to_json(self) -> dict:
        return {"T": self.T, "H": self.H, "N": self.N,
                "entries": np.where(np.isnan(self.entries), -1.0, self.entries).tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "PredictionErrorTensor":
        e = np.asarray(d["entries"], dtype=float)
        return cls(np.where(e < 0, np.nan, e))


def valid_mask(T: int, H: int, N: int) -> np.ndarray:
    t = np.arange(1, T)[:, None, None]
    h = np.arange(1, H + 1)[None, :, None]
    return np.broadcast_to(t + h <= T, (T - 1, H, N))


def index_grid(T: int, H: int, N: int) -> np.ndarray:
    """Rows ``(t, h, i)`` of the simultaneous index set, ``i`` zero-based."""
    t, h, i = np.nonzero(valid_mask(T, H, N))
    return np.column_stack([t + 1, h + 1, i])


def prediction_errors(Y: np.ndarray, dt: float, H: int, window: int = DEFAULT_WINDOW) -> PredictionErrorTensor:
    """Constant-velocity prediction errors for a full obstacle trajectory (T+1, N, 2)."""
    Y = np.asarray(Y, dtype=float)
    T = Y.shape[0] - 1
    P = predict_all(Y, dt, H, window)
    out = np.full((T - 1, H, Y.shape[1]), np.nan)
    for h in range(1, H + 1):
        n = T - h  # base times t = 1..T-h
        if n <= 0:
            continue
        out[:n, h - 1] = np.linalg.norm(P[:n, h - 1] - Y[1 + h: 1 + h + n], axis=-1)
    return PredictionErrorTensor(out)


@dataclass(frozen=True)
class SigmaTable:
    """Normalizers indexed by lookahead offset (row ``h-1``) and agent."""

    sigma: np.ndarray
    floor: float = SIGMA_FLOOR

    def __post_init__(self):
        s = np.asarray(self.sigma, dtype=float)
        if s.ndim != 2 or np.any(~np.isfinite(s)) or np.any(s <= 0):
            raise ValueError("sigma must be a positive (H, N) table")
        object.__setattr__(self, "sigma", s)

    @property
    def sigma_min(self) -> float:
        return float(self.sigma.min())

    @property
    def H(self) -> int:
        return self.sigma.shape[0]

    def __call__(self, h: int, i: int) -> float:
        return float(self.sigma[h - 1, i])

    def scaled(self, lam: float) -> "SigmaTable":
        return SigmaTable(self.sigma * lam, self.floor * lam)

    def to_json(self) -> dict:
        return {"floor": self.floor,
                "sigma": {f"{h + 1}:{i}": float(v) for (h, i), v in np.ndenumerate(self.sigma)}}

    @classmethod
    def from_json(cls, d: dict) -> "SigmaTable":
        keys = [tuple(int(p) for p in k.split(":")) for k in d["sigma"]]
        H = max(k[0] for k in keys)
        N = max(k[1] for k in keys) + 1
        s = np.empty((H, N))
        for (h, i), v in zip(keys, d["sigma"].values()):
            s[h - 1, i] = v
        return cls(s, float(d["floor"]))


def fit_sigma(calibration_errors: Sequence[PredictionErrorTensor], floor: float = SIGMA_FLOOR) -> SigmaTable:
    """Mean error per (offset, agent) over episodes and base times, floored."""
    if not calibration_errors:
        raise ValueError("need at least one episode")
    if floor <= 0:
        raise ValueError("floor must be positive")
    stack = np.stack([e.entries for e in calibration_errors])
    with np.errstate(invalid="ignore"):
        cnt = np.sum(~np.isnan(stack), axis=(0, 1))
        tot = np.nansum(stack, axis=(0, 1))
    mean = np.where(cnt > 0, tot / np.maximum(cnt, 1), 0.0)
    return SigmaTable(np.maximum(mean, floor), floor)


def episode_score(errors: PredictionErrorTensor, sigma: SigmaTable) -> float:
    """Largest sigma-normalized error over the simultaneous index set."""
    e = errors.entries
    if sigma.H < errors.H or sigma.sigma.shape[1] < errors.N:
        raise ValueError("sigma table does not cover every offset and agent")
    ratio = e / sigma.sigma[: errors.H, : errors.N][None]
    if np.all(np.isnan(ratio)):
        raise ValueError("empty error tensor")
    return float(np.nanmax(ratio))


def synthetic_contexts(eta: float, T: int, H: int, N: int) -> np.ndarray:
    """Conditioning rows ``(eta, t, h, i)`` covering the simultaneous index set."""
    g = index_grid(T, H, N).astype(float)
    return np.column_stack([np.full(len(g), eta), g])


def _seed_streams(rng_seed, K: int):
    ss = rng_seed if isinstance(rng_seed, np.random.SeedSequence) else np.random.SeedSequence(rng_seed)
    return ss.spawn(K)


def synthetic_scores(model, eta: float, T: int, H: int, N: int, sigma: SigmaTable, K: int,
                     rng_seed, batch_rows: int = 8192) -> np.ndarray:
    """``K`` synthetic episode scores, each from its own spawned seed stream."""
    if K < 1:
        raise ValueError("K must be >= 1")
    ctx = synthetic_contexts(eta, T, H, N)
    g = index_grid(T, H, N)
    norm = sigma.sigma[g[:, 1] - 1, g[:, 2]]
    streams = _seed_streams(rng_seed, K)
    per = max(1, batch_rows // len(ctx))
    Td = model.schedule.T_diff
    out = np.empty(K)
    for a in range(0, K, per):
        b = min(a + per, K)
        noise = np.concatenate(
            [np.random.default_rng(s).standard_normal((Td, len(ctx)), dtype=np.float32)
             for s in streams[a:b]], axis=1)
        draws = model.sample_residual(np.tile(ctx, (b - a, 1)), noise)
        draws = np.maximum(draws, 0.0).reshape(b - a, len(ctx))
        out[a:b] = np.max(draws / norm, axis=1)
    return out


def synthetic_episode_score(model, eta: float, T: int, H: int, N: int, sigma: SigmaTable, rng_seed) -> float:
    return float(synthetic_scores(model, eta, T, H, N, sigma, 1, rng_seed)[0])


def build_synthetic_scoreset(model, eta: float, T: int, H: int, N: int, sigma: SigmaTable, K: int,
                             rng_seed) -> ScoreSet:
    return ScoreSet(synthetic_scores(model, eta, T, H, N, sigma, K, rng_seed),
                    Provenance.SYNTHETIC, {"eta": float(eta)})


@dataclass(frozen=True)
class RegionRadii:
    radii: np.ndarray  # (H, N); row h-1 is the radius for tau = t + h
    quantile: QuantileResult
    t: int
    centers_source: str = "constant_velocity"


def region_radii(quantile: QuantileResult, sigma: SigmaTable, t: int, H: int, N: int,
                 centers_source: str = "constant_velocity") -> RegionRadii:
    """Radii ``sigma(h, i) * (C + correction)`` for ``tau = t+1 .. t+H``."""
    if quantile.infinite or not math.isfinite(quantile.c_robust):
        raise UnboundedRegion("infinite quantile gives unbounded prediction regions")
    if H > sigma.H or N > sigma.sigma.shape[1]:
        raise ValueError("sigma table too small for the requested horizon")
    scale = quantile.c_nominal + quantile.delta_correction
    return RegionRadii(sigma.sigma[:H, :N] * scale, quantile, t, centers_source)
