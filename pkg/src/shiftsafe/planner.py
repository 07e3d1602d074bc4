"""Receding-horizon planner with ball-shaped obstacle regions.

Single shooting over the ``(H, 2)`` input sequence ``(steer, accel)``.  Box
input bounds are kept by projection; collision and corridor constraints
enter through an augmented-Lagrangian penalty whose weight grows until the
worst violation drops below tolerance.  Gradients come from an adjoint pass
through the bicycle model.
"""
from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numba as nb
import numpy as np

from .sim import SimConfig


class Status(enum.Enum):
    OPTIMAL = "Optimal"
    MAX_ITER = "MaxIter"
    INFEASIBLE = "Infeasible"


@dataclass(frozen=True)
class PlannerConfig:
    w_track: float = 1.0
    w_u: float = 0.1
    w_term: float = 5.0
    tol: float = 1e-6
    buffer: float = 1e-4
    rho0: float = 100.0
    rho_mult: float = 10.0
    rho_max: float = 1e9
    max_outer: int = 20
    max_inner: int = 60
    inner_tol: float = 1e-9
    steer_seeds: tuple = (0.0, 0.15, -0.15)
    debug: bool = False


@dataclass
class MPCProblem:
    state: np.ndarray  # (4,) x, y, theta, v
    preds: np.ndarray  # (H, N, 2) predicted obstacle centres for t+1..t+H
    radii: np.ndarray  # (H, N) region radii
    goal: np.ndarray = field(default_factory=lambda: np.array([35.0, -0.5]))
    sim: SimConfig = field(default_factory=SimConfig)

    def __post_init__(self):
        self.state = np.asarray(self.state, dtype=float)
        self.preds = np.asarray(self.preds, dtype=float).reshape(-1, np.shape(self.preds)[-2], 2) \
            if np.size(self.preds) else np.zeros((np.shape(self.radii)[0], 0, 2))
        self.radii = np.asarray(self.radii, dtype=float).reshape(self.preds.shape[:2])
        self.goal = np.asarray(self.goal, dtype=float)
        if np.any(self.radii < 0):
            raise ValueError("radii must be nonnegative")

    @property
    def H(self) -> int:
        return self.preds.shape[0]


@dataclass
class MPCSolution:
    inputs: np.ndarray
    states: np.ndarray
    objective: float
    status: Status
    solve_ms: float = 0.0
    max_violation: float = 0.0
    fallback: bool = False
    trace: List[dict] = field(default_factory=list)


def tighten_constraint(pred, radius: float, eps: float, ego_pos) -> float:
    """Worst-case clearance to any point of the ball around ``pred``."""
    d = np.asarray(ego_pos, dtype=float)[:2] - np.asarray(pred, dtype=float)
    return float(math.hypot(d[0], d[1]) - radius - eps)


# ---------------------------------------------------------------- kernels

@nb.njit(cache=True)
def _rollout(x0, U, dt, L, vmin, vmax, clamp=True):
    H = U.shape[0]
    X = np.empty((H + 1, 4))
    X[0] = x0
    for k in range(H):
        x, y, th, v = X[k, 0], X[k, 1], X[k, 2], X[k, 3]
        X[k + 1, 0] = x + dt * v * math.cos(th)
        X[k + 1, 1] = y + dt * v * math.sin(th)
        X[k + 1, 2] = th + dt * (v / L) * math.tan(U[k, 0])
        vn = v + dt * U[k, 1]
        X[k + 1, 3] = min(max(vn, vmin), vmax) if clamp else vn
    return X


@nb.njit(cache=True)
def _constraints(X, preds, radii, eps, ybound, buf, vmin=-np.inf, vmax=np.inf):
    """Margins (H, N+4) minus ``buf``: obstacle clearances, corridor sides, speed bounds."""
    H, N = radii.shape
    C = np.empty((H, N + 4))
    for k in range(H):
        px, py = X[k + 1, 0], X[k + 1, 1]
        for i in range(N):
            dx, dy = px - preds[k, i, 0], py - preds[k, i, 1]
            C[k, i] = math.sqrt(dx * dx + dy * dy) - radii[k, i] - eps - buf
        C[k, N] = ybound - py - buf
        C[k, N + 1] = py + ybound - buf
        C[k, N + 2] = vmax - X[k + 1, 3] - buf
        C[k, N + 3] = X[k + 1, 3] - vmin - buf
    return C


@nb.njit(cache=True)
def _al_term(c, lam, rho):
    """Augmented-Lagrangian value and derivative for ``c >= 0``."""
    if rho * c <= lam:
        return -lam * c + 0.5 * rho * c * c, -lam + rho * c
    return -0.5 * lam * lam / rho, 0.0


@nb.njit(cache=True)
def _obj_grad(U, x0, dt, L, vmin, vmax, goal, w_track, w_u, w_term,
              preds, radii, eps, ybound, buf, lam, rho):
    H, N = radii.shape
    X = _rollout(x0, U, dt, L, vmin, vmax, False)
    f = 0.0
    G = np.zeros((H, 2))
    # stage gradients with respect to states 1..H
    dX = np.zeros((H + 1, 4))
    for k in range(H):
        f += w_u * (U[k, 0] ** 2 + U[k, 1] ** 2)
        G[k, 0] = 2.0 * w_u * U[k, 0]
        G[k, 1] = 2.0 * w_u * U[k, 1]
        px, py = X[k + 1, 0], X[k + 1, 1]
        w = w_track + (w_term if k == H - 1 else 0.0)
        ex, ey = px - goal[0], py - goal[1]
        f += w * (ex * ex + ey * ey)
        dX[k + 1, 0] += 2.0 * w * ex
        dX[k + 1, 1] += 2.0 * w * ey
        for i in range(N):
            dx, dy = px - preds[k, i, 0], py - preds[k, i, 1]
            dist = math.sqrt(dx * dx + dy * dy)
            c = dist - radii[k, i] - eps - buf
            val, dv = _al_term(c, lam[k, i], rho)
            f += val
            if dv != 0.0 and dist > 1e-12:
                dX[k + 1, 0] += dv * dx / dist
                dX[k + 1, 1] += dv * dy / dist
        val, dv = _al_term(ybound - py - buf, lam[k, N], rho)
        f += val
        dX[k + 1, 1] -= dv
        val, dv = _al_term(py + ybound - buf, lam[k, N + 1], rho)
        f += val
        dX[k + 1, 1] += dv
        val, dv = _al_term(vmax - X[k + 1, 3] - buf, lam[k, N + 2], rho)
        f += val
        dX[k + 1, 3] -= dv
        val, dv = _al_term(X[k + 1, 3] - vmin - buf, lam[k, N + 3], rho)
        f += val
        dX[k + 1, 3] += dv
    # adjoint sweep
    p = dX[H].copy()
    for k in range(H - 1, -1, -1):
        th, v = X[k, 2], X[k, 3]
        phi = U[k, 0]
        c_, s_ = math.cos(th), math.sin(th)
        tphi = math.tan(phi)
        # input gradients
        G[k, 0] += p[2] * dt * v / (L * math.cos(phi) ** 2)
        G[k, 1] += p[3] * dt
        # state adjoint
        q0 = p[0]
        q1 = p[1]
        q2 = p[2] + p[0] * (-dt * v * s_) + p[1] * (dt * v * c_)
        q3 = p[0] * dt * c_ + p[1] * dt * s_ + p[2] * dt * tphi / L + p[3]
        p[0], p[1], p[2], p[3] = q0 + dX[k, 0], q1 + dX[k, 1], q2 + dX[k, 2], q3 + dX[k, 3]
    return f, G


@nb.njit(cache=True)
def _project(U, lo, hi):
    out = np.empty_like(U)
    for k in range(U.shape[0]):
        for m in range(2):
            out[k, m] = min(max(U[k, m], lo[m]), hi[m])
    return out


@nb.njit(cache=True)
def _inner(U0, lo, hi, x0, dt, L, vmin, vmax, goal, w_track, w_u, w_term,
           preds, radii, eps, ybound, buf, lam, rho, max_iter, tol):
    """Projected Newton on the box with a finite-difference Hessian of the gradient."""
    H = U0.shape[0]
    n = 2 * H
    U = _project(U0, lo, hi)
    f, G = _obj_grad(U, x0, dt, L, vmin, vmax, goal, w_track, w_u, w_term,
                     preds, radii, eps, ybound, buf, lam, rho)
    scale = max(1.0, abs(f))
    Hm = np.empty((n, n))
    for it in range(max_iter):
        g = G.ravel()
        u = U.ravel()
        pg = 0.0
        for v in range(n):
            m = v % 2
            r = abs(u[v] - min(max(u[v] - g[v], lo[m]), hi[m]))
            if r > pg:
                pg = r
        if pg <= tol * scale:
            return U, f, it, True
        act_eps = min(1e-3, pg)
        free = np.ones(n, dtype=np.bool_)
        for v in range(n):
            m = v % 2
            if (u[v] <= lo[m] + act_eps and g[v] > 0) or (u[v] >= hi[m] - act_eps and g[v] < 0):
                free[v] = False
        # Hessian columns by forward differences of the analytic gradient
        for v in range(n):
            hstep = 1e-6 * max(1.0, abs(u[v]))
            Up = U.copy()
            Up.ravel()[v] += hstep
            _, Gp = _obj_grad(Up, x0, dt, L, vmin, vmax, goal, w_track, w_u, w_term,
                              preds, radii, eps, ybound, buf, lam, rho)
            gp = Gp.ravel()
            for w in range(n):
                Hm[w, v] = (gp[w] - g[w]) / hstep
        idx = np.nonzero(free)[0]
        d = np.zeros(n)
        for v in range(n):
            if not free[v]:
                d[v] = -g[v]
        if idx.size > 0:
            Hf = np.empty((idx.size, idx.size))
            for a in range(idx.size):
                for b in range(idx.size):
                    Hf[a, b] = 0.5 * (Hm[idx[a], idx[b]] + Hm[idx[b], idx[a]])
            ev = np.linalg.eigvalsh(Hf)
            shift = 0.0
            floor = 1e-8 * max(1.0, abs(ev[-1]))
            if ev[0] < floor:
                shift = floor - ev[0]
            for a in range(idx.size):
                Hf[a, a] += shift
            df = np.linalg.solve(Hf, -g[idx])
            for a in range(idx.size):
                d[idx[a]] = df[a]
        D = d.reshape(H, 2)
        step = 1.0
        accepted = False
        for _ in range(40):
            Un = _project(U + step * D, lo, hi)
            fn, Gn = _obj_grad(Un, x0, dt, L, vmin, vmax, goal, w_track, w_u, w_term,
                               preds, radii, eps, ybound, buf, lam, rho)
            dec = 0.0
            for k in range(H):
                for m in range(2):
                    dec += G[k, m] * (U[k, m] - Un[k, m])
            if fn <= f - 1e-4 * dec:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # retry along the plain negative gradient before giving up
            step = 1.0 / max(1.0, np.abs(g).max())
            for _ in range(60):
                Un = _project(U - step * G, lo, hi)
                fn, Gn = _obj_grad(Un, x0, dt, L, vmin, vmax, goal, w_track, w_u, w_term,
                                   preds, radii, eps, ybound, buf, lam, rho)
                dec = 0.0
                for k in range(H):
                    for m in range(2):
                        dec += G[k, m] * (U[k, m] - Un[k, m])
                if fn <= f - 1e-4 * dec:
                    accepted = True
                    break
                step *= 0.5
        if not accepted:
            return U, f, it, False
        U, f, G = Un, fn, Gn
    return U, f, max_iter, False


# ---------------------------------------------------------------- python API

def _args(problem: MPCProblem, pc: PlannerConfig):
    s = problem.sim
    return (problem.state, s.dt, s.wheelbase, s.v_min, s.v_max, problem.goal,
            pc.w_track, pc.w_u, pc.w_term, problem.preds, problem.radii, s.eps, s.y_bound)


def rollout(problem: MPCProblem, U: np.ndarray) -> np.ndarray:
    s = problem.sim
    return _rollout(problem.state, np.asarray(U, dtype=float), s.dt, s.wheelbase, s.v_min, s.v_max)


def margins(problem: MPCProblem, states: np.ndarray) -> np.ndarray:
    """Tightened margins (H, N+2); the last two columns are the corridor sides."""
    s = problem.sim
    C = _constraints(np.asarray(states, dtype=float), problem.preds, problem.radii, s.eps, s.y_bound, 0.0)
    return C[:, : problem.radii.shape[1] + 2]


def objective(problem: MPCProblem, U: np.ndarray, lam: Optional[np.ndarray] = None, rho: float = 0.0,
              pc: PlannerConfig = PlannerConfig()):
    """Penalized objective and its gradient with respect to the inputs.

    The optimizer works on the unclamped speed recursion and keeps speed
    inside its bounds through penalty terms, which keeps this smooth.
    """
    H, N = problem.radii.shape
    lam = np.zeros((H, N + 4)) if lam is None else np.asarray(lam, dtype=float)
    x0, dt, L, vmin, vmax, goal, wt, wu, wT, P, R, eps, yb = _args(problem, pc)
    return _obj_grad(np.asarray(U, dtype=float), x0, dt, L, vmin, vmax, goal, wt, wu, wT, P, R, eps, yb,
                     0.0, lam, max(rho, 1e-300))


def _bounds(problem: MPCProblem):
    s = problem.sim
    return np.array([-s.phi_max, -s.a_max]), np.array([s.phi_max, s.a_max])


def _solve_from(problem: MPCProblem, U0: np.ndarray, pc: PlannerConfig):
    H, N = problem.radii.shape
    lo, hi = _bounds(problem)
    x0, dt, L, vmin, vmax, goal, wt, wu, wT, P, R, eps, yb = _args(problem, pc)
    lam = np.zeros((H, N + 4))
    rho = pc.rho0
    U = U0
    trace = []
    prev = math.inf
    converged = False
    viol = math.inf
    for outer in range(pc.max_outer):
        U, f, iters, converged = _inner(U, lo, hi, x0, dt, L, vmin, vmax, goal, wt, wu, wT,
                                        P, R, eps, yb, pc.buffer, lam, rho, pc.max_inner, pc.inner_tol)
        X = _rollout(x0, U, dt, L, vmin, vmax, False)
        C = _constraints(X, P, R, eps, yb, pc.buffer, vmin, vmax)
        viol = max(0.0, -float(C.min())) if C.size else 0.0
        if pc.debug:
            trace.append({"outer": outer, "rho": rho, "inner_iters": int(iters), "violation": viol,
                          "objective": float(f)})
        if viol <= pc.tol and converged:
            break
        lam = np.maximum(0.0, lam - rho * C)
        if viol > 0.25 * prev and rho < pc.rho_max:
            rho *= pc.rho_mult
        prev = viol
    X = _rollout(x0, U, dt, L, vmin, vmax)
    true_viol = max(0.0, -float(margins(problem, X).min())) if H else 0.0
    base = pc.w_u * float(np.sum(U ** 2)) + sum(
        (pc.w_track + (pc.w_term if k == H - 1 else 0.0)) * float(np.sum((X[k + 1, :2] - problem.goal) ** 2))
        for k in range(H))
    if true_viol > pc.tol:
        status = Status.INFEASIBLE
    elif viol <= pc.tol and converged:
        status = Status.OPTIMAL
    else:
        status = Status.MAX_ITER
    return MPCSolution(U, X, base, status, max_violation=true_viol, trace=trace)


def _seeds(problem: MPCProblem, warm: Optional["MPCSolution"], pc: PlannerConfig) -> List[np.ndarray]:
    H = problem.H
    out = []
    if warm is not None and warm.inputs.shape[0] >= 1:
        w = np.vstack([warm.inputs[1:], warm.inputs[-1:]])[:H]
        if w.shape[0] < H:
            w = np.vstack([w, np.repeat(w[-1:], H - w.shape[0], axis=0)])
        out.append(w)
    for phi in pc.steer_seeds:
        out.append(np.column_stack([np.full(H, phi), np.zeros(H)]))
    return out


def solve(problem: MPCProblem, warm_start: Optional[MPCSolution] = None,
          pc: PlannerConfig = PlannerConfig()) -> MPCSolution:
    """Best solution over the warm start and fixed steering seeds."""
    t0 = time.perf_counter()
    if not np.all(np.isfinite(problem.radii)) or not np.all(np.isfinite(problem.preds)):
        sol = fallback(problem)
        sol.status, sol.fallback = Status.INFEASIBLE, False
        sol.max_violation = math.inf
        sol.solve_ms = 1e3 * (time.perf_counter() - t0)
        return sol
    best = None
    rank = {Status.OPTIMAL: 0, Status.MAX_ITER: 1, Status.INFEASIBLE: 2}
    for U0 in _seeds(problem, warm_start, pc):
        sol = _solve_from(problem, U0, pc)
        if not math.isfinite(sol.objective):
            raise FloatingPointError("non-finite objective in planner")
        key = (rank[sol.status], sol.max_violation if sol.status is Status.INFEASIBLE else 0.0, sol.objective)
        if best is None or key < best[0]:
            best = (key, sol)
    sol = best[1]
    sol.solve_ms = 1e3 * (time.perf_counter() - t0)
    return sol


def fallback(problem: MPCProblem) -> MPCSolution:
    """Full braking with straight wheels over the horizon."""
    H = problem.H
    U = np.column_stack([np.zeros(H), np.full(H, -problem.sim.a_max)])
    X = rollout(problem, U)
    return MPCSolution(U, X, math.nan, Status.INFEASIBLE, fallback=True)
