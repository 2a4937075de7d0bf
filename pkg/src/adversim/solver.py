"""Convex inner problem over the jerk sequence, solved by operator splitting.

The decision variable is the stacked jerk sequence x = [jx; jy] of length 2T.
Accelerations, velocities, and positions are affine images of x through the
discrete integrator, so the realism objective is an unconstrained convex
quadratic and every constraint is a closed convex set with a cheap projection:

  * per-step Euclidean balls on velocity and acceleration norms,
  * per-step halfspaces (lane-corridor boundaries) on positions,
  * one terminal ball tying the position at the collision step to the AV,
  * optionally a per-step jerk-norm ball (used by the outer repair pass).

The splitting scheme is consensus ADMM with over-relaxation: alternate an
equality-constrained quadratic solve (a cached Cholesky factorization) with
per-channel projections and scaled dual updates. Channels are normalized by
their physical scale so a single penalty parameter works across units. The
channel order is fixed: velocity, acceleration, jerk ball, halfspaces, and
the terminal ball last, which lets the outer search sweep collision steps
while reusing duals and a corridor-level factorization (the terminal ball
contributes a rank-2 Cholesky update).

Two interchangeable backends run the iteration loop: a compiled kernel
(``adversim._fastsolve``) used when the extension built, and a pure-numpy
fallback. Set ``ADVERSIM_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from adversim.kinematics import ControlProfile, propagate

DEFAULT_TOL = 1e-5
DEFAULT_MAX_ITER = 5000
DEFAULT_RHO = 3.0
DEFAULT_EPS_DUAL = 1e-3   # relative dual-residual tolerance
OVER_RELAX = 1.6
STALL_WINDOW = 500       # iterations without 1% improvement ...
STALL_RESIDUAL = 1e-2    # ... while the violation still exceeds this => infeasible
RHO_MIN = 1e-2
RHO_MAX = 1e4
ADAPT_INTERVAL = 50      # iterations between penalty-adaptation checks
ADAPT_TRIGGER = 5.0      # residual-ratio sqrt beyond which the penalty moves

STATUS_OPTIMAL = "optimal"
STATUS_INFEASIBLE = "infeasible"
STATUS_MAX_ITER = "max_iter"

try:  # compiled kernel is optional; the numpy path is a full implementation
    if os.environ.get("ADVERSIM_PURE_PYTHON"):
        _fastsolve = None
    else:
        from adversim import _fastsolve
except ImportError:  # pragma: no cover - depends on build environment
    _fastsolve = None


def solver_backend() -> str:
    return "compiled" if _fastsolve is not None else "numpy"


def project_ball(x: np.ndarray, radius: float, center: np.ndarray | None = None) -> np.ndarray:
    """Euclidean projection onto a ball; the identity for interior points."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    x = np.asarray(x, dtype=float)
    c = np.zeros_like(x) if center is None else np.asarray(center, dtype=float)
    d = x - c
    n = float(np.linalg.norm(d))
    if n <= radius:
        return x.copy()
    return c + d * (radius / n)


def project_halfspace(x: np.ndarray, normal: np.ndarray, offset: float) -> np.ndarray:
    """Euclidean projection onto {y : normal . y <= offset}."""
    x = np.asarray(x, dtype=float)
    n = np.asarray(normal, dtype=float)
    nn = float(n @ n)
    if nn <= 0:
        raise ValueError("normal must be non-zero")
    excess = float(n @ x) - offset
    if excess <= 0:
        return x.copy()
    return x - (excess / nn) * n


@dataclass(frozen=True, eq=False)
class Halfspace:
    """Position constraint normal . p[step] <= offset at one timestep (1-based)."""

    step: int
    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float).reshape(2)
        norm = float(np.hypot(n[0], n[1]))
        if norm <= 0 or not np.isfinite(norm):
            raise ValueError("halfspace normal must be non-zero and finite")
        # store unit normal so the offset reads as a signed distance in meters
        n = n / norm
        n.setflags(write=False)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset) / norm)


@dataclass(frozen=True, eq=False)
class InnerProblem:
    horizon: int
    dt: float
    p0: np.ndarray
    v0: np.ndarray
    a0: np.ndarray
    accel_weight: np.ndarray   # per-axis quadratic weight on (a - accel_target)
    accel_target: np.ndarray
    jerk_weight: np.ndarray
    jerk_target: np.ndarray
    v_max: float | None = None
    a_max: float | None = None
    halfspaces: tuple[Halfspace, ...] = ()
    terminal_step: int | None = None
    terminal_center: np.ndarray | None = None
    terminal_radius: float = 0.0
    jerk_ball: float | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        for name in ("p0", "v0", "a0", "accel_weight", "accel_target", "jerk_weight", "jerk_target"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(2)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.accel_weight < 0) or np.any(self.jerk_weight < 0):
            raise ValueError("objective weights must be non-negative")
        if not (np.any(self.accel_weight > 0) or np.any(self.jerk_weight > 0)):
            raise ValueError("objective must be positive definite: all weights are zero")
        object.__setattr__(self, "halfspaces", tuple(self.halfspaces))
        for hs in self.halfspaces:
            if not (1 <= hs.step <= self.horizon):
                raise ValueError(f"halfspace step {hs.step} outside 1..{self.horizon}")
        if self.terminal_step is not None:
            if not (1 <= self.terminal_step <= self.horizon):
                raise ValueError(f"terminal step {self.terminal_step} outside 1..{self.horizon}")
            if self.terminal_radius <= 0:
                raise ValueError("terminal radius must be positive")
            c = np.asarray(self.terminal_center, dtype=float).reshape(2)
            c.setflags(write=False)
            object.__setattr__(self, "terminal_center", c)
        if self.jerk_ball is not None and self.jerk_ball <= 0:
            raise ValueError("jerk ball radius must be positive")


@dataclass(frozen=True, eq=False)
class InnerSolution:
    jerks: np.ndarray
    profile: ControlProfile
    objective_value: float
    status: str
    primal_residual: float  # max physical constraint violation of the profile
    iterations: int
    warm_data: tuple | None = field(default=None, repr=False)
    residual_history: np.ndarray | None = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# Integrator basis matrices (affine maps jerk -> state sequences), cached per (T, dt)
# ---------------------------------------------------------------------------

_BASIS_CACHE: dict[tuple[int, float], tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def integrator_basis(horizon: int, dt: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(Ca, Cv, Cp): response of a[1..T], v[1..T], p[1..T] to unit jerks j[0..T-1]."""
    key = (horizon, round(dt, 12))
    cached = _BASIS_CACHE.get(key)
    if cached is not None:
        return cached
    t_idx = np.arange(1, horizon + 1)[:, None]
    k_idx = np.arange(horizon)[None, :]
    lag = t_idx - 1 - k_idx  # steps elapsed after jerk k first acts (on a[k+1])
    ca = np.where(lag >= 0, dt, 0.0)
    cv = np.where(lag >= 1, dt * dt * lag, 0.0)
    cp = np.where(lag >= 1, 0.5 * dt**3 * lag * lag, 0.0)
    for m in (ca, cv, cp):
        m.setflags(write=False)
    _BASIS_CACHE[key] = (ca, cv, cp)
    return ca, cv, cp


def free_response(problem: InnerProblem) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """State sequences for zero jerk: a, v, p at steps 1..T, each (T, 2)."""
    t = np.arange(1, problem.horizon + 1)[:, None] * problem.dt
    a = np.broadcast_to(problem.a0, (problem.horizon, 2)).copy()
    v = problem.v0 + t * problem.a0
    p = problem.p0 + t * problem.v0 + 0.5 * t * t * problem.a0
    return a, v, p


# ---------------------------------------------------------------------------
# Dense assembly (numpy backend and corridor-level caching)
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class _Assembled:
    problem: InnerProblem
    big_h: np.ndarray       # (2T, 2T) objective Hessian
    q: np.ndarray           # (2T,)
    g: np.ndarray           # (m, 2T) scaled constraint map, terminal rows last
    h: np.ndarray           # (m,) scaled constant terms
    ball_rows: np.ndarray   # (n_ball2, 2) row-index pairs of 2-D unit-ball channels
    hs_rows: np.ndarray     # row indices of scalar halfspace channels (set <= 0)
    phys_scale: np.ndarray  # (m,) multiply scaled violation to get physical units
    # terminal lens: the collision-step corridor slab folded into the terminal
    # ball channel, so one projection handles their (possibly thin) intersection
    lens: tuple[np.ndarray, float, float] | None = None  # (unit normal, lo, hi) scaled

    @property
    def m_rows(self) -> int:
        return self.g.shape[0]


def objective_terms(problem: InnerProblem) -> tuple[np.ndarray, np.ndarray]:
    """Hessian and linear term of F(x) = sum w_a |a - mu_a|^2 + w_j |j - mu_j|^2."""
    T = problem.horizon
    ca, _, _ = integrator_basis(T, problem.dt)
    big_h = np.zeros((2 * T, 2 * T))
    q = np.zeros(2 * T)
    cata = ca.T @ ca
    ones = ca.T @ np.ones(T)
    for ax in range(2):
        wa = problem.accel_weight[ax]
        wj = problem.jerk_weight[ax]
        sl = slice(ax * T, (ax + 1) * T)
        big_h[sl, sl] = 2.0 * (wa * cata + wj * np.eye(T))
        drift = problem.a0[ax] - problem.accel_target[ax]  # free response is constant a0
        q[sl] = 2.0 * wa * drift * ones - 2.0 * wj * problem.jerk_target[ax]
    return big_h, q


def assemble(problem: InnerProblem) -> _Assembled:
    """Dense scaled constraint map with the canonical channel order.

    Order: velocity balls, acceleration balls, jerk balls, halfspaces, terminal
    ball (always the final two rows when present).
    """
    T = problem.horizon
    ca, cv, cp = integrator_basis(T, problem.dt)
    a_free, v_free, p_free = free_response(problem)
    big_h, q = objective_terms(problem)

    blocks: list[np.ndarray] = []
    consts: list[np.ndarray] = []
    ball_rows: list[tuple[int, int]] = []
    scales: list[np.ndarray] = []
    row_count = 0
    zero = np.zeros((T, T))

    def add_ball_block(basis: np.ndarray, const_xy: np.ndarray, scale: float):
        nonlocal row_count
        # interleave x/y rows so each ball channel occupies adjacent rows
        block = np.empty((2 * basis.shape[0], 2 * T))
        block[0::2, :T] = basis
        block[0::2, T:] = 0.0
        block[1::2, :T] = 0.0
        block[1::2, T:] = basis
        blocks.append(block / scale)
        consts.append(const_xy.reshape(-1) / scale)
        for i in range(basis.shape[0]):
            ball_rows.append((row_count + 2 * i, row_count + 2 * i + 1))
        scales.append(np.full(2 * basis.shape[0], scale))
        row_count += 2 * basis.shape[0]

    if problem.v_max is not None:
        add_ball_block(cv, v_free, problem.v_max)
    if problem.a_max is not None:
        add_ball_block(ca, a_free, problem.a_max)
    if problem.jerk_ball is not None:
        add_ball_block(np.eye(T), np.zeros((T, 2)), problem.jerk_ball)

    hs_rows = []
    if problem.halfspaces:
        hs_block = np.empty((len(problem.halfspaces), 2 * T))
        hs_const = np.empty(len(problem.halfspaces))
        for i, hs in enumerate(problem.halfspaces):
            t = hs.step - 1
            hs_block[i, :T] = hs.normal[0] * cp[t]
            hs_block[i, T:] = hs.normal[1] * cp[t]
            hs_const[i] = float(hs.normal @ p_free[t]) - hs.offset
            hs_rows.append(row_count + i)
        blocks.append(hs_block)
        consts.append(hs_const)
        scales.append(np.ones(len(problem.halfspaces)))
        row_count += len(problem.halfspaces)

    if problem.terminal_step is not None:
        t = problem.terminal_step - 1
        add_ball_block(cp[t:t + 1], p_free[t] - problem.terminal_center, problem.terminal_radius)

    g = np.vstack(blocks) if blocks else np.zeros((0, 2 * T))
    h = np.concatenate(consts) if consts else np.zeros(0)
    return _Assembled(
        problem=problem,
        big_h=big_h,
        q=q,
        g=g,
        h=h,
        ball_rows=np.array(ball_rows, dtype=np.intp).reshape(-1, 2),
        hs_rows=np.array(hs_rows, dtype=np.intp),
        phys_scale=np.concatenate(scales) if scales else np.zeros(0),
        lens=terminal_lens(problem),
    )


def terminal_lens(problem: InnerProblem) -> tuple[np.ndarray, float, float] | None:
    """Slab bounds induced at the terminal step by an antiparallel halfspace pair,
    expressed in the ball-scaled frame centered on the terminal center."""
    if problem.terminal_step is None:
        return None
    at_step = [hs for hs in problem.halfspaces if hs.step == problem.terminal_step]
    for i in range(len(at_step)):
        for k in range(len(at_step)):
            if i == k:
                continue
            n1, n2 = at_step[i].normal, at_step[k].normal
            if abs(float(n1 @ n2) + 1.0) < 1e-9:  # antiparallel pair
                c, r = problem.terminal_center, problem.terminal_radius
                hi = (at_step[i].offset - float(n1 @ c)) / r
                lo = (-at_step[k].offset - float(n1 @ c)) / r
                return n1.copy(), lo, hi
    if at_step:  # single boundary: one-sided slab
        n1 = at_step[0].normal
        c, r = problem.terminal_center, problem.terminal_radius
        hi = (at_step[0].offset - float(n1 @ c)) / r
        return n1.copy(), -np.inf, hi
    return None


def project_lens(w: np.ndarray, normal: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Projection onto the unit disc intersected with lo <= normal . w <= hi."""
    t = float(normal @ w)
    t_cl = min(max(t, lo), hi)
    q = w + (t_cl - t) * normal
    if float(np.hypot(q[0], q[1])) <= 1.0:
        return q
    nw = float(np.hypot(w[0], w[1]))
    if nw > 1.0:
        a = w / nw
        ta = float(normal @ a)
        if lo <= ta <= hi:
            return a
        edge = hi if ta > hi else lo
    else:
        edge = hi if t > hi else lo
    edge = min(max(edge, -1.0), 1.0)
    span = math.sqrt(max(1.0 - edge * edge, 0.0))
    perp = np.array([-normal[1], normal[0]])
    side = 1.0 if float(perp @ w) >= 0.0 else -1.0
    return edge * normal + side * span * perp


def _physical_violation(asm: _Assembled, w: np.ndarray) -> float:
    viol = 0.0
    if asm.ball_rows.size:
        px = w[asm.ball_rows[:, 0]]
        py = w[asm.ball_rows[:, 1]]
        excess = (np.hypot(px, py) - 1.0) * asm.phys_scale[asm.ball_rows[:, 0]]
        viol = max(viol, float(excess.max()))
    if asm.hs_rows.size:
        viol = max(viol, float((w[asm.hs_rows] * asm.phys_scale[asm.hs_rows]).max()))
    return max(viol, 0.0)


def _project(asm: _Assembled, w: np.ndarray) -> np.ndarray:
    z = w.copy()
    if asm.ball_rows.size:
        ix, iy = asm.ball_rows[:, 0], asm.ball_rows[:, 1]
        norms = np.hypot(z[ix], z[iy])
        factor = np.where(norms > 1.0, 1.0 / np.maximum(norms, 1e-300), 1.0)
        z[ix] *= factor
        z[iy] *= factor
    if asm.hs_rows.size:
        z[asm.hs_rows] = np.minimum(z[asm.hs_rows], 0.0)
    if asm.lens is not None:
        ix, iy = asm.ball_rows[-1]
        normal, lo, hi = asm.lens
        z[[ix, iy]] = project_lens(w[[ix, iy]], normal, lo, hi)
    return z


def _numpy_loop(
    asm: _Assembled,
    big_h: np.ndarray,
    gram: np.ndarray,
    tol: float,
    max_iter: int,
    rho: float,
    warm: tuple | None,
    collect_history: bool,
    eps_dual: float,
) -> tuple[np.ndarray, np.ndarray, str, int, np.ndarray | None]:
    g, h, q = asm.g, asm.h, asm.q
    n = q.shape[0]
    chol = scipy.linalg.cho_factor(big_h + rho * gram, lower=True, check_finite=False)
    if warm is not None and warm[0].shape[0] == n and warm[1].shape[0] == asm.m_rows:
        x = warm[0].copy()
        u = warm[1].copy()
        z = _project(asm, g @ x + h + u)
    else:
        x = np.zeros(n)
        u = np.zeros(asm.m_rows)
        z = _project(asm, g @ x + h)

    q_scale = max(1.0, float(np.abs(q).max()))
    best_viol = math.inf
    best_iter = 0
    last_adapt = 0
    history = np.empty(max_iter) if collect_history else None
    status = STATUS_MAX_ITER
    it = 0
    for it in range(1, max_iter + 1):
        dual_force = rho * (g.T @ (z - u - h))
        rhs = -q + dual_force
        x = scipy.linalg.cho_solve(chol, rhs, check_finite=False)
        w = g @ x + h
        w_relaxed = OVER_RELAX * w + (1.0 - OVER_RELAX) * z
        z_prev = z
        z = _project(asm, w_relaxed + u)
        u = u + w_relaxed - z

        viol = _physical_violation(asm, w)
        if collect_history:
            history[it - 1] = viol
        r_dual = rho * float(np.abs(g.T @ (z - z_prev)).max())
        dual_scale = max(q_scale, float(np.abs(dual_force).max()))
        if viol < 0.99 * best_viol:
            best_viol, best_iter = viol, it
        if viol <= tol and r_dual <= eps_dual * dual_scale:
            status = STATUS_OPTIMAL
            break
        if it - best_iter >= STALL_WINDOW and best_viol > STALL_RESIDUAL:
            status = STATUS_INFEASIBLE
            break

        if it - last_adapt >= ADAPT_INTERVAL:
            w_mag = max(float(np.abs(w).max()), float(np.abs(z).max()), 1e-10)
            rp_rel = float(np.abs(w - z).max()) / w_mag
            rd_rel = r_dual / max(dual_scale, 1e-10)
            if rp_rel > 1e-300 and rd_rel > 1e-300:
                ratio = math.sqrt(rp_rel / rd_rel)
                if ratio > ADAPT_TRIGGER or ratio < 1.0 / ADAPT_TRIGGER:
                    rho_new = min(max(rho * ratio, RHO_MIN), RHO_MAX)
                    if rho_new != rho:
                        u *= rho / rho_new
                        rho = rho_new
                        chol = scipy.linalg.cho_factor(
                            big_h + rho * gram, lower=True, check_finite=False)
                    last_adapt = it

    return x, u, status, it, (history[:it] if collect_history else None)


def _solve_numpy(asm, tol, max_iter, rho, warm, collect_history, eps_dual):
    if asm.m_rows == 0:
        x = np.linalg.solve(asm.big_h, -asm.q)
        return x, np.zeros(0), STATUS_OPTIMAL, 0, None
    gram = asm.g.T @ asm.g
    return _numpy_loop(asm, asm.big_h, gram, tol, max_iter, rho, warm, collect_history, eps_dual)


def _call_kernel(
    problem: InnerProblem,
    q: np.ndarray,
    big_h: np.ndarray,
    gram_base: np.ndarray,
    tol: float,
    max_iter: int,
    rho: float,
    warm: tuple | None,
    collect_history: bool,
    m_rows: int,
    eps_dual: float,
) -> tuple[np.ndarray, np.ndarray, str, int, np.ndarray | None]:
    """Run the compiled loop. ``gram_base`` excludes the terminal-ball rows."""
    hs_steps = np.array([hs.step for hs in problem.halfspaces], dtype=np.int64)
    hs_normals = (
        np.ascontiguousarray([hs.normal for hs in problem.halfspaces], dtype=float)
        if problem.halfspaces else np.zeros((0, 2))
    )
    hs_offsets = np.array([hs.offset for hs in problem.halfspaces], dtype=float)

    n = q.shape[0]
    if warm is not None and warm[0].shape[0] == n and warm[1].shape[0] == m_rows:
        x = warm[0].copy()
        u = warm[1].copy()
        warm_flag = 1
    else:
        x = np.zeros(n)
        u = np.zeros(m_rows)
        warm_flag = 0

    history = np.empty(max_iter if collect_history else 0)
    term_step = problem.terminal_step or 0
    term_center = problem.terminal_center if problem.terminal_center is not None else np.zeros(2)
    lens = terminal_lens(problem)
    if lens is not None:
        lens_n, lens_lo, lens_hi = lens
        lens_args = (1, float(lens_n[0]), float(lens_n[1]),
                     float(lens_lo) if np.isfinite(lens_lo) else -1e300, float(lens_hi))
    else:
        lens_args = (0, 0.0, 0.0, 0.0, 0.0)

    status_code, iterations = _fastsolve.admm_solve(
        problem.horizon, problem.dt,
        np.ascontiguousarray(problem.p0), np.ascontiguousarray(problem.v0),
        np.ascontiguousarray(problem.a0),
        np.ascontiguousarray(q),
        np.ascontiguousarray(big_h), np.ascontiguousarray(gram_base),
        0.0 if problem.v_max is None else problem.v_max,
        0.0 if problem.a_max is None else problem.a_max,
        0.0 if problem.jerk_ball is None else problem.jerk_ball,
        hs_steps, hs_normals, hs_offsets,
        term_step, np.ascontiguousarray(term_center, dtype=float), problem.terminal_radius,
        *lens_args,
        rho, OVER_RELAX, tol, eps_dual, max_iter,
        STALL_WINDOW, STALL_RESIDUAL,
        RHO_MIN, RHO_MAX, ADAPT_INTERVAL, ADAPT_TRIGGER,
        x, u, warm_flag,
        history, 1 if collect_history else 0,
    )
    status = {0: STATUS_OPTIMAL, 1: STATUS_INFEASIBLE, 2: STATUS_MAX_ITER}[status_code]
    return x, u, status, iterations, (history[:iterations] if collect_history else None)


def _solve_compiled(asm, tol, max_iter, rho, warm, collect_history, eps_dual):
    if asm.m_rows == 0:
        x = np.linalg.solve(asm.big_h, -asm.q)
        return x, np.zeros(0), STATUS_OPTIMAL, 0, None
    p = asm.problem
    g_base = asm.g[:-2] if p.terminal_step is not None else asm.g
    gram_base = g_base.T @ g_base
    return _call_kernel(p, asm.q, asm.big_h, gram_base, tol, max_iter, rho, warm,
                        collect_history, asm.m_rows, eps_dual)


def objective_value(problem: InnerProblem, profile: ControlProfile) -> float:
    """Quadratic cost of a profile under the problem's objective terms."""
    a = profile.a[1:]
    j = profile.j
    val = float(np.sum(problem.accel_weight * (a - problem.accel_target) ** 2))
    val += float(np.sum(problem.jerk_weight * (j - problem.jerk_target) ** 2))
    return val


def constraint_violation(problem: InnerProblem, profile: ControlProfile) -> float:
    """Max violation of the problem's constraint set by a profile, physical units."""
    viol = 0.0
    if problem.v_max is not None:
        viol = max(viol, float(np.linalg.norm(profile.v[1:], axis=1).max() - problem.v_max))
    if problem.a_max is not None:
        viol = max(viol, float(np.linalg.norm(profile.a[1:], axis=1).max() - problem.a_max))
    for hs in problem.halfspaces:
        viol = max(viol, float(hs.normal @ profile.p[hs.step] - hs.offset))
    if problem.terminal_step is not None:
        d = float(np.linalg.norm(profile.p[problem.terminal_step] - problem.terminal_center))
        viol = max(viol, d - problem.terminal_radius)
    if problem.jerk_ball is not None:
        viol = max(viol, float(np.linalg.norm(profile.j, axis=1).max() - problem.jerk_ball))
    return max(viol, 0.0)


def _finish(problem: InnerProblem, x, u, status, iterations, history, tol, debug_csv) -> InnerSolution:
    T = problem.horizon
    jerks = np.column_stack([x[:T], x[T:]])
    profile = propagate((problem.p0, problem.v0, problem.a0), jerks, problem.dt)
    residual = constraint_violation(problem, profile)
    if status == STATUS_OPTIMAL and residual > 10.0 * tol:
        status = STATUS_MAX_ITER  # scaled-space convergence did not carry to the profile

    if debug_csv and history is not None:
        with open(debug_csv, "w", encoding="utf-8") as fh:
            fh.write("iteration,violation\n")
            for i, v in enumerate(history, start=1):
                fh.write(f"{i},{v!r}\n")

    return InnerSolution(
        jerks=jerks,
        profile=profile,
        objective_value=objective_value(problem, profile),
        status=status,
        primal_residual=residual,
        iterations=iterations,
        warm_data=(x.copy(), u.copy()),
        residual_history=history,
    )


def solve(
    problem: InnerProblem,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    rho: float = DEFAULT_RHO,
    warm_start: tuple | None = None,
    collect_history: bool = False,
    debug_csv: str | None = None,
    eps_dual: float = DEFAULT_EPS_DUAL,
) -> InnerSolution:
    """Solve an inner problem. Deterministic for fixed inputs and backend."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    asm = assemble(problem)
    backend = _solve_numpy if _fastsolve is None else _solve_compiled
    x, u, status, iterations, history = backend(
        asm, tol, max_iter, rho, warm_start, collect_history, eps_dual)
    return _finish(problem, x, u, status, iterations, history, tol, debug_csv)


class TerminalSweepSolver:
    """Solve a family of inner problems differing only in the terminal ball.

    The outer intention search sweeps candidate collision steps within one lane
    corridor; everything except the two terminal rows is shared, so the dense
    map and the base Cholesky factor are built once. Warm starts (including
    duals, with the terminal pair reset) carry between consecutive steps.
    """

    def __init__(
        self,
        base: InnerProblem,
        tol: float = DEFAULT_TOL,
        max_iter: int = DEFAULT_MAX_ITER,
        rho: float = DEFAULT_RHO,
        eps_dual: float = DEFAULT_EPS_DUAL,
    ):
        if base.terminal_step is not None:
            raise ValueError("base problem must not carry a terminal ball")
        self.base = base
        self.tol = tol
        self.max_iter = max_iter
        self.rho = rho
        self.eps_dual = eps_dual
        self.asm = assemble(base)
        self._gram_base = self.asm.g.T @ self.asm.g
        _, _, self._cp = integrator_basis(base.horizon, base.dt)
        _, _, self._p_free = free_response(base)

    def solve_terminal(
        self,
        step: int,
        center: np.ndarray,
        radius: float,
        warm_start: tuple | None = None,
    ) -> InnerSolution:
        problem = replace(
            self.base, terminal_step=step,
            terminal_center=np.asarray(center, dtype=float), terminal_radius=radius,
        )
        m_rows = self.asm.m_rows + 2
        if warm_start is not None:
            wu = warm_start[1]
            if wu.shape[0] == m_rows:
                wu = wu.copy()
                wu[-2:] = 0.0  # terminal duals are meaningless across steps
                warm_start = (warm_start[0], wu)
            else:
                warm_start = None

        if _fastsolve is not None:
            x, u, status, iterations, history = _call_kernel(
                problem, self.asm.q, self.asm.big_h, self._gram_base, self.tol,
                self.max_iter, self.rho, warm_start, False, m_rows, self.eps_dual,
            )
        else:
            t = step - 1
            row_x = np.concatenate([self._cp[t], np.zeros(self.base.horizon)]) / radius
            row_y = np.concatenate([np.zeros(self.base.horizon), self._cp[t]]) / radius
            g = np.vstack([self.asm.g, row_x, row_y])
            h = np.concatenate([
                self.asm.h,
                (self._p_free[t] - np.asarray(center, dtype=float)) / radius,
            ])
            asm = _Assembled(
                problem=problem,
                big_h=self.asm.big_h,
                q=self.asm.q,
                g=g,
                h=h,
                ball_rows=np.vstack([self.asm.ball_rows, [[m_rows - 2, m_rows - 1]]]).astype(np.intp),
                hs_rows=self.asm.hs_rows,
                phys_scale=np.concatenate([self.asm.phys_scale, [radius, radius]]),
                lens=terminal_lens(problem),
            )
            gram = self._gram_base + np.outer(row_x, row_x) + np.outer(row_y, row_y)
            x, u, status, iterations, history = _numpy_loop(
                asm, self.asm.big_h, gram, self.tol, self.max_iter, self.rho,
                warm_start, False, self.eps_dual,
            )
        return _finish(problem, x, u, status, iterations, history, self.tol, None)
