"""Constant-velocity trajectory predictor for obstacle positions."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

DEFAULT_WINDOW = 4


class InsufficientHistory(ValueError):
    pass


@dataclass(frozen=True)
class ObstacleHistory:
    positions: np.ndarray  # (t+1, 2)
    dt: float

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim != 2 or pos.shape[1] != 2:
            raise ValueError("positions must have shape (n, 2)")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "positions", pos)


@dataclass(frozen=True)
class PredictionSet:
    yhat: np.ndarray  # (H, N, 2); row h-1 is the prediction for t+h
    t: int
    H: int

    def at(self, tau: int, i: int) -> np.ndarray:
        return self.yhat[tau - self.t - 1, i]


class Predictor(Protocol):
    def __call__(self, histories: Sequence[ObstacleHistory], t: int, H: int) -> PredictionSet: ...


def _slope_weights(n: int, dt: float) -> np.ndarray:
    """Weights w with v_hat = sum_k w_k p_k for an n-point least-squares line."""
    times = np.arange(n, dtype=float) * dt
    centred = times - times.mean()
    return centred / np.dot(centred, centred)


def velocity_estimate(positions: np.ndarray, dt: float, window: int = DEFAULT_WINDOW) -> np.ndarray:
    pos = np.asarray(positions, dtype=float)
    n = min(window, pos.shape[0])
    if n < 2:
        raise InsufficientHistory("need at least two samples")
    return _slope_weights(n, dt) @ pos[-n:]


def predict(histories: Sequence[ObstacleHistory], t: int, H: int,
            window: int = DEFAULT_WINDOW) -> PredictionSet:
    """Extrapolate each obstacle from its position at ``t`` with a fitted velocity."""
    if H < 1:
        raise ValueError("H must be positive")
    steps = np.arange(1, H + 1, dtype=float)
    out = np.empty((H, len(histories), 2))
    for i, hist in enumerate(histories):
        past = hist.positions[: t + 1]
        if past.shape[0] < t + 1 or past.shape[0] < 2:
            raise InsufficientHistory(f"obstacle {i} has {past.shape[0]} samples at t={t}")
        v = velocity_estimate(past, hist.dt, window)
        out[:, i] = past[-1] + steps[:, None] * hist.dt * v
    return PredictionSet(out, t, H)


def predict_all(Y: np.ndarray, dt: float, H: int, window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Predictions from every base time ``t = 1..T-1`` of a full trajectory.

    ``Y`` has shape (T+1, N, 2).  Returns (T-1, H, N, 2) where entry
    ``[t-1, h-1]`` predicts time ``t+h`` from data up to ``t``.
    """
    Y = np.asarray(Y, dtype=float)
    T = Y.shape[0] - 1
    steps = np.arange(1, H + 1, dtype=float)[:, None, None]
    out = np.empty((T - 1, H, Y.shape[1], 2))
    full = _slope_weights(window, dt)
    for t in range(1, T):
        n = min(window, t + 1)
        w = full if n == window else _slope_weights(n, dt)
        v = np.tensordot(w, Y[t + 1 - n: t + 1], axes=1)
        out[t - 1] = Y[t] + steps * dt * v
    return out
