"""Two-lane corridor world: ego bicycle kinematics and goal-seeking obstacles."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.125
    T: int = 80
    H: int = 10
    eps: float = 0.3
    T_b: int = 8
    wheelbase: float = 0.5
    ego_start: Tuple[float, float, float, float] = (0.0, -0.5, 0.0, 0.8)
    ego_goal: Tuple[float, float] = (35.0, -0.5)
    v_min: float = 0.0
    v_max: float = 2.0
    phi_max: float = 0.6
    a_max: float = 2.0
    y_bound: float = 1.0
    # obstacle model
    relax_time: float = 2.0
    lat_gain: float = 0.3
    lat_speed_max: float = 0.5
    vel_noise: float = 0.005
    sense_radius: float = 3.0
    clearance: float = 0.3


@dataclass(frozen=True)
class EgoState:
    x: float
    y: float
    theta: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.v])

    @classmethod
    def from_array(cls, a) -> "EgoState":
        return cls(*(float(z) for z in a))


@dataclass(frozen=True)
class EgoInput:
    phi: float
    a: float


def ego_step(s: EgoState, u: EgoInput, dt: float, wheelbase: float = 0.5,
             v_min: float = 0.0, v_max: float = 2.0) -> EgoState:
    """Forward-Euler kinematic bicycle update with speed clamping."""
    x = s.x + dt * s.v * math.cos(s.theta)
    y = s.y + dt * s.v * math.sin(s.theta)
    theta = s.theta + dt * (s.v / wheelbase) * math.tan(u.phi)
    v = min(max(s.v + dt * u.a, v_min), v_max)
    return EgoState(x, y, theta, v)


def rollout_ego(s0: EgoState, inputs: np.ndarray, cfg: SimConfig) -> np.ndarray:
    """States (len(inputs)+1, 4) from applying rows ``(phi, a)`` in turn."""
    out = np.empty((len(inputs) + 1, 4))
    s = s0
    out[0] = s.as_array()
    for k, (phi, a) in enumerate(np.asarray(inputs, dtype=float)):
        s = ego_step(s, EgoInput(phi, a), cfg.dt, cfg.wheelbase, cfg.v_min, cfg.v_max)
        out[k + 1] = s.as_array()
    return out


# ---------------------------------------------------------------- environments

EnvKey = Union[int, str]


@dataclass(frozen=True)
class EnvironmentConfig:
    k: EnvKey
    starts: Tuple[Tuple[float, float], ...] = ((20.0, -0.5), (30.0, 0.5))
    goal_x: Tuple[float, ...] = (0.0, 10.0)
    goal_y_interval: Tuple[Tuple[float, float], ...] = ((-0.515, -0.485), (0.485, 0.515))
    speed_interval: Tuple[float, float] = (0.5, 1.0)
    dt: float = 0.125
    seed: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        for lo, hi in (*self.goal_y_interval, self.speed_interval):
            if not lo <= hi:
                raise ValueError("empty interval")

    @property
    def n_obstacles(self) -> int:
        return len(self.starts)

    def to_json(self) -> dict:
        return asdict(self)


def goal_latitudes(k: int) -> Tuple[Tuple[float, float], Tuple[float, float]]:
    """Goal y-intervals for obstacles A and B in shifted environment ``k``."""
    if not 1 <= k <= 10:
        raise ValueError("environment index must be in 1..10")
    lo, hi = -0.06 + 0.03 * (k - 1), -0.03 + 0.03 * (k - 1)
    return (lo, hi), (-hi, -lo)


def environment(k: EnvKey, seed: int = 0, dt: float = 0.125) -> EnvironmentConfig:
    if k == "train":
        return EnvironmentConfig("train", dt=dt, seed=seed)
    ya, yb = goal_latitudes(int(k))
    return EnvironmentConfig(int(k), goal_y_interval=(ya, yb), speed_interval=(0.55, 1.05),
                             dt=dt, seed=seed)


@dataclass(frozen=True)
class ObstacleParams:
    goals: np.ndarray  # (N, 2)
    speeds: np.ndarray  # (N,)


def sample_environment(cfg: EnvironmentConfig, rng: np.random.Generator) -> ObstacleParams:
    gy = np.array([rng.uniform(lo, hi) for lo, hi in cfg.goal_y_interval])
    v = rng.uniform(*cfg.speed_interval, size=cfg.n_obstacles)
    goals = np.column_stack([np.asarray(cfg.goal_x, dtype=float), gy])
    return ObstacleParams(goals, v)


# ---------------------------------------------------------------- obstacles

_ROT_GRID = np.deg2rad(np.arange(0.0, 180.5, 0.5))


def _in_cone(v_rel: np.ndarray, d: np.ndarray, half_angle: float) -> np.ndarray:
    """Whether relative velocities (rows) point into the cone around ``d``."""
    nv = np.linalg.norm(v_rel, axis=-1)
    nd = np.linalg.norm(d)
    cos = (v_rel @ d) / np.maximum(nv * nd, 1e-12)
    return (nv > 1e-12) & (cos > math.cos(half_angle))


def _rotate(v: np.ndarray, ang: np.ndarray) -> np.ndarray:
    c, s = np.cos(ang), np.sin(ang)
    return np.stack([c * v[0] - s * v[1], s * v[0] + c * v[1]], axis=-1)


def avoid(v_cand: np.ndarray, pos: np.ndarray, neighbors: Sequence[Tuple[np.ndarray, np.ndarray]],
          sense_radius: float, clearance: float) -> Optional[np.ndarray]:
    """Smallest rotation of ``v_cand`` clearing every neighbor's collision cone.

    Returns None when no neighbor is in conflict.  Clockwise rotations win
    ties, so head-on encounters resolve to the right.
    """
    active = []
    for p_j, v_j in neighbors:
        d = p_j - pos
        dist = float(np.linalg.norm(d))
        if dist > sense_radius or dist < 1e-12:
            continue
        active.append((d, v_j, math.asin(min(1.0, clearance / dist))))
    if not active:
        return None
    if not any(_in_cone((v_cand - v_j)[None], d, a)[0] for d, v_j, a in active):
        return None
    for ang in _ROT_GRID[1:]:
        for sgn in (-1.0, 1.0):
            cand = _rotate(v_cand, np.array(sgn * ang))
            if not any(_in_cone((cand - v_j)[None], d, a)[0] for d, v_j, a in active):
                return cand
    return np.zeros(2)


def obstacle_step(pos: np.ndarray, vel: np.ndarray, goal: np.ndarray, speed: float,
                  neighbors: Sequence[Tuple[np.ndarray, np.ndarray]], dt: float,
                  cfg: SimConfig = SimConfig(), noise: Optional[np.ndarray] = None
                  ) -> Tuple[np.ndarray, np.ndarray, bool]:
    """Advance one obstacle; returns (position, velocity, reached_goal).

    The preferred velocity keeps ``speed`` along the lane toward the goal and
    steers laterally toward the goal latitude with gain ``cfg.lat_gain``.  The
    actual velocity relaxes toward it with time constant ``cfg.relax_time``.
    A neighbor conflict replaces it by the rotated avoidance velocity.
    """
    pos = np.asarray(pos, dtype=float)
    goal = np.asarray(goal, dtype=float)
    to_goal = goal - pos
    dist = float(np.linalg.norm(to_goal))
    if dist <= speed * dt:
        return goal.copy(), np.zeros(2), True
    v_pref = np.array([speed * math.copysign(1.0, to_goal[0]),
                       np.clip(cfg.lat_gain * to_goal[1], -cfg.lat_speed_max, cfg.lat_speed_max)])
    gain = min(1.0, dt / cfg.relax_time) if cfg.relax_time > 0 else 1.0
    v_new = vel + gain * (v_pref - vel)
    if noise is not None:
        v_new = v_new + noise
    dodge = avoid(v_new, pos, neighbors, cfg.sense_radius, cfg.clearance)
    if dodge is not None:
        v_new = dodge
    return pos + dt * v_new, v_new, False


def simulate_obstacles(env: EnvironmentConfig, params: ObstacleParams, cfg: SimConfig,
                       rng: np.random.Generator, T: Optional[int] = None) -> np.ndarray:
    """Obstacle positions (T+1, N, 2); obstacles start moving along the lane."""
    T = cfg.T if T is None else T
    n = env.n_obstacles
    pos = np.array(env.starts, dtype=float)
    vel = np.zeros((n, 2))
    for i in range(n):
        vel[i, 0] = params.speeds[i] * math.copysign(1.0, params.goals[i, 0] - pos[i, 0])
    done = np.zeros(n, dtype=bool)
    noise = rng.normal(0.0, cfg.vel_noise, size=(T, n, 2))
    Y = np.empty((T + 1, n, 2))
    Y[0] = pos
    for t in range(T):
        new_pos, new_vel = pos.copy(), vel.copy()
        for i in range(n):
            if done[i]:
                continue
            nbrs = [(pos[j], vel[j]) for j in range(n) if j != i]
            new_pos[i], new_vel[i], done[i] = obstacle_step(
                pos[i], vel[i], params.goals[i], params.speeds[i], nbrs, env.dt, cfg, noise[t, i])
        pos, vel = new_pos, new_vel
        Y[t + 1] = pos
    return Y


def estimate_nuisance(Y: np.ndarray, T_b: int, dt: float) -> float:
    """Mean absolute lateral velocity over the first ``T_b`` steps, over all obstacles."""
    Y = np.asarray(Y, dtype=float)
    if Y.shape[0] < T_b + 1:
        raise ValueError(f"buffer needs {T_b + 1} samples, got {Y.shape[0]}")
    lat = np.abs(np.diff(Y[: T_b + 1, :, 1], axis=0)) / dt
    return float(lat.sum() / (Y.shape[1] * T_b))


def check_collision(ego_pos, obstacles, eps: float) -> Tuple[bool, float]:
    obs = np.atleast_2d(np.asarray(obstacles, dtype=float))
    margin = float(np.min(np.linalg.norm(obs - np.asarray(ego_pos, dtype=float)[:2], axis=1)) - eps)
    return margin < 0.0, margin


@dataclass
class EpisodeTrace:
    env: str
    case: int
    loop: str
    seed: int
    eta: float
    ego_states: np.ndarray
    ego_inputs: np.ndarray
    obstacles: np.ndarray
    radius_scale: float
    collision: bool
    coverage: bool
    fallback: bool
    infeasible: bool
    min_margin: float
    step_ms: np.ndarray
    score: float = float("nan")
    r_used: float = 0.0
    statuses: list = field(default_factory=list)

    def to_json(self) -> dict:
        d = {}
        for k, v in self.__dict__.items():
            if isinstance(v, np.ndarray):
                v = v.tolist()
            elif isinstance(v, float) and not math.isfinite(v):
                v = None
            d[k] = v
        return d
