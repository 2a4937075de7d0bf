"""Adversarial intention transfer: outer search wrapping the convex inner problem.

The outer loop enumerates AV trajectory candidates, collision steps, and lane
corridors. For each combination it solves the inner problem with a terminal
ball tying the opponent to the candidate AV position at the collision step,
then keeps the feasible solution with the highest realism objective (ties
broken toward the earliest collision). The search phase runs the solver at a
relaxed tolerance; the winning combination is re-solved tightly and must pass
independent post-checks (limits including heading rate, true drivable margin,
terminal distance) before it is returned, with one bounded repair attempt.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from adversim import kinematics, priors, solver
from adversim.kinematics import ControlProfile, KinematicLimits
from adversim.priors import KinematicPrior
from adversim.scenario import Scenario, Trajectory

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class AvCandidate:
    trajectory: Trajectory  # states[0] = current AV pose, states[1..T] = future
    source: str             # playback | constant-velocity | rule-planner
    weight: float = 1.0

    def positions(self) -> np.ndarray:
        return self.trajectory.positions


@dataclass(frozen=True, eq=False)
class AdversarialIntention:
    goal: np.ndarray
    collision_step: int
    seed_profile: ControlProfile
    objective_value: float
    av_candidate: str
    corridor: tuple[int, ...]

    def __post_init__(self):
        g = np.asarray(self.goal, dtype=float).reshape(2)
        g.setflags(write=False)
        object.__setattr__(self, "goal", g)


@dataclass(frozen=True)
class IntentionConfig:
    k_av_candidates: int = 3
    max_corridors: int = 4
    t_min_seconds: float = 0.5
    good_enough_objective: float | None = None
    tol: float = solver.DEFAULT_TOL
    max_iter: int = solver.DEFAULT_MAX_ITER
    rho: float = solver.DEFAULT_RHO
    # relaxed settings for the enumeration phase; the winner is re-solved tightly
    search_tol: float = 1e-3
    search_eps_dual: float = 1e-2
    search_max_iter: int = 1200
    # pruning and execution margins
    reach_margin: float = 0.25
    min_lens_depth: float = 0.3
    exec_margin: float = 0.01
    # keep the goal strictly inside the road: the horizon-step slab is
    # tightened by this margin so boundary-riding optima do not land on
    # (or a solver-tolerance hair beyond) the drivable edge
    goal_margin: float = 0.03
    dedup_threshold: float = 0.5
    max_final_attempts: int = 10
    # objectives within this relative band count as ties (earliest step wins);
    # solver noise makes exact ties unobservable otherwise
    tie_epsilon_rel: float = 0.01


# ---------------------------------------------------------------------------
# AV trajectory candidates
# ---------------------------------------------------------------------------


def _finite_difference_state(traj: Trajectory, index: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(p, v, a) at a trajectory index from the last three states up to it."""
    p = traj.positions[index].copy()
    dt = traj.dt
    if index >= 1:
        v = (traj.positions[index] - traj.positions[index - 1]) / dt
    else:
        v = np.zeros(2)
    if index >= 2:
        a = (traj.positions[index] - 2.0 * traj.positions[index - 1] + traj.positions[index - 2]) / dt**2
    else:
        a = np.zeros(2)
    return p, v, a


def estimate_av_candidates(
    scenario: Scenario,
    planner=None,
    k: int = 3,
    seed: int = 0,
    dedup_threshold: float = 0.5,
) -> list[AvCandidate]:
    """Up to k candidate AV futures: playback, constant velocity, planner rollouts.

    ``planner`` is a black box ``(scenario, seed) -> Trajectory`` returning the
    future at the scenario time base; failures drop that candidate with a
    warning. The playback candidate is always present. Near-duplicates (within
    ``dedup_threshold`` meters over the horizon) are dropped.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    av = scenario.av
    h = scenario.history_steps
    future = av.trajectory.states[h:]
    candidates = [AvCandidate(trajectory=Trajectory(dt=scenario.dt, states=future), source="playback")]

    if k >= 2:
        p0, v0, _ = _finite_difference_state(av.trajectory, h)
        steps = scenario.future_steps
        times = np.arange(steps + 1)[:, None] * scenario.dt
        pos = p0 + times * v0
        heading = av.trajectory.headings[h]
        states = np.column_stack([pos, np.full(steps + 1, heading)])
        candidates.append(
            AvCandidate(trajectory=Trajectory(dt=scenario.dt, states=states), source="constant-velocity"))

    if planner is not None:
        for i in range(max(0, k - 2)):
            try:
                traj = planner(scenario, seed + i)
                candidates.append(AvCandidate(trajectory=traj, source="rule-planner"))
            except Exception as err:  # planner is a black box; do not trust it
                log.warning("AV planner rollout failed (%s); candidate dropped", err)

    kept: list[AvCandidate] = []
    for cand in candidates:
        dup = False
        for other in kept:
            n = min(len(cand.trajectory), len(other.trajectory))
            dev = np.linalg.norm(cand.positions()[:n] - other.positions()[:n], axis=1).max()
            if dev < dedup_threshold:
                dup = True
                break
        if not dup:
            kept.append(cand)
    return kept[:k]


# ---------------------------------------------------------------------------
# Lane corridors
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Corridor:
    """Per-step slab approximation of a drivable band along a lane chain."""

    lane_ids: tuple[int, ...]
    normals: np.ndarray   # (T, 2) unit normals
    lows: np.ndarray      # (T,)
    highs: np.ndarray     # (T,)
    constrained: bool = True

    def halfspaces(self) -> tuple[solver.Halfspace, ...]:
        if not self.constrained:
            return ()
        out = []
        for t in range(self.normals.shape[0]):
            n = self.normals[t]
            out.append(solver.Halfspace(step=t + 1, normal=n, offset=self.highs[t]))
            out.append(solver.Halfspace(step=t + 1, normal=-n, offset=-self.lows[t]))
        return tuple(out)

    def slab_depth(self, step: int, center: np.ndarray, radius: float) -> float:
        """Penetration of a ball into the slab at a step; <= 0 means disjoint."""
        if not self.constrained:
            return 2.0 * radius
        t = float(self.normals[step - 1] @ center)
        lo, hi = self.lows[step - 1], self.highs[step - 1]
        if t < lo:
            return radius - (lo - t)
        if t > hi:
            return radius - (t - hi)
        return radius + min(t - lo, hi - t)


def _chain_points(map_model, lane_ids: list[int]) -> np.ndarray:
    pts = [map_model.lanes[lane_ids[0]].points[:, :2]]
    for lid in lane_ids[1:]:
        pts.append(map_model.lanes[lid].points[1:, :2])
    return np.vstack(pts)


def _successor_chain(map_model, start: int, needed_length: float) -> list[int]:
    chain = [start]
    pts = map_model.lanes[start].points
    length = kinematics.polyline_length(pts)
    while length < needed_length:
        end_pt = map_model.lanes[chain[-1]].points[-1]
        found = None
        for i, lane in enumerate(map_model.lanes):
            if i in chain:
                continue
            gap = np.hypot(*(lane.points[0, :2] - end_pt[:2]))
            dtheta = abs(math.atan2(math.sin(lane.points[0, 2] - end_pt[2]),
                                    math.cos(lane.points[0, 2] - end_pt[2])))
            if gap < 2.0 and dtheta < math.pi / 2:
                found = i
                break
        if found is None:
            break
        chain.append(found)
        length += kinematics.polyline_length(map_model.lanes[found].points)
    return chain


def enumerate_corridors(
    scenario: Scenario,
    max_corridors: int = 4,
    horizon_steps: int | None = None,
    av_path: np.ndarray | None = None,
) -> list[Corridor]:
    """Candidate drivable bands for the opponent, ordered by proximity to the AV path.

    The opponent's own lane chain gives one corridor; each adjacent parallel
    lane adds a merge corridor spanning both bands (valid because abutting
    lanes form contiguous drivable area). An opponent off every lane yields a
    single unconstrained corridor with a warning.
    """
    ov = scenario.ov
    if ov is None:
        raise ValueError("scenario has no opponent vehicle")
    steps = horizon_steps if horizon_steps is not None else scenario.future_steps
    h = scenario.history_steps
    p0, v0, _ = _finite_difference_state(ov.trajectory, h)
    speed = float(np.linalg.norm(v0))

    map_model = scenario.map
    lateral = [kinematics.polyline_distance(lane.points[:, :2], p0) for lane in map_model.lanes]
    own = int(np.argmin(lateral))
    if lateral[own] > map_model.lanes[own].width / 2.0 + 2.0:
        log.warning("opponent is off every lane; using an unconstrained corridor")
        zeros = np.zeros(steps)
        return [Corridor(lane_ids=(), normals=np.tile([0.0, 1.0], (steps, 1)),
                         lows=zeros, highs=zeros, constrained=False)]

    needed = max(speed, 2.0) * steps * scenario.dt + 20.0
    chain = _successor_chain(map_model, own, needed)
    chain_pts = _chain_points(map_model, chain)
    s0 = kinematics.arc_progress(p0, chain_pts)
    v_nom = min(max(speed, 2.0), 30.0)

    refs = np.empty((steps, 2))
    tangents = np.empty((steps, 2))
    for t in range(steps):
        refs[t], tangents[t] = kinematics.point_at_arclength(chain_pts, s0 + v_nom * (t + 1) * scenario.dt)
    normals = np.column_stack([-tangents[:, 1], tangents[:, 0]])
    offs = np.einsum("ij,ij->i", normals, refs)
    w_own = map_model.lanes[own].width

    corridors = [Corridor(lane_ids=tuple(chain), normals=normals,
                          lows=offs - w_own / 2.0, highs=offs + w_own / 2.0)]

    own_heading = map_model.lanes[own].points[0, 2]
    for i, lane in enumerate(map_model.lanes):
        if i == own:
            continue
        dtheta = abs(math.atan2(math.sin(lane.points[0, 2] - own_heading),
                                math.cos(lane.points[0, 2] - own_heading)))
        parallel = dtheta < math.radians(15.0) or dtheta > math.radians(165.0)
        if not parallel:
            continue
        gap = kinematics.polyline_distance(lane.points[:, :2], p0)
        if gap > (w_own + lane.width) / 2.0 + 1.0:
            continue
        # merge corridor: the slab spans this band plus the neighbor's
        adj_offs = np.empty(steps)
        for t in range(steps):
            s_adj = kinematics.arc_progress(refs[t], lane.points[:, :2])
            adj_pt, _ = kinematics.point_at_arclength(lane.points[:, :2], s_adj)
            adj_offs[t] = float(normals[t] @ adj_pt)
        lows = np.minimum(offs - w_own / 2.0, adj_offs - lane.width / 2.0)
        highs = np.maximum(offs + w_own / 2.0, adj_offs + lane.width / 2.0)
        corridors.append(Corridor(lane_ids=tuple(chain) + (i,), normals=normals, lows=lows, highs=highs))

    if av_path is not None:
        def distance_to_av(c: Corridor) -> float:
            mids = (c.lows + c.highs) / 2.0
            centers = c.normals * mids[:, None] + tangents * np.einsum("ij,ij->i", tangents, refs)[:, None]
            n = min(len(av_path), centers.shape[0])
            return float(np.linalg.norm(centers[:n] - av_path[:n], axis=1).min())
        corridors.sort(key=lambda c: (distance_to_av(c), c.lane_ids))
    return corridors[:max_corridors]


# ---------------------------------------------------------------------------
# The nested search
# ---------------------------------------------------------------------------


def reachable_distance(t_star: int, dt: float, speed: float, limits: KinematicLimits) -> float:
    """Upper bound on distance coverable in t_star steps from the given speed."""
    k = np.arange(t_star)
    speeds = np.minimum(limits.v_max, speed + limits.a_max * (k + 1) * dt)
    return float((speeds * dt).sum() + 0.5 * limits.a_max * dt * dt * t_star)


def _objective(prior: KinematicPrior, profile: ControlProfile) -> float:
    return priors.profile_objective(prior, profile)


def _post_check(
    profile: ControlProfile,
    limits: KinematicLimits,
    area: kinematics.DrivableArea | None,
    center: np.ndarray,
    t_star: int,
    d_thres: float,
    initial_heading: float,
) -> tuple[bool, bool, float]:
    """(passes, heading_ok, worst_margin) against the true constraint set."""
    violations = kinematics.check_limits(profile, limits, initial_heading)
    hard = [v for v in violations if v.magnitude > 1e-4]
    heading_ok = not any(v.kind == "heading_rate" for v in hard)
    bounds_ok = not any(v.kind in ("velocity", "acceleration") for v in hard)
    worst_margin = math.inf
    margin_ok = True
    if area is not None:
        margins = area.margin_many(profile.p)
        worst_margin = float(margins.min())
        margin_ok = worst_margin >= -1e-3
    terminal_ok = float(np.linalg.norm(profile.p[t_star] - center)) <= d_thres + 1e-4
    return heading_ok and bounds_ok and margin_ok and terminal_ok, heading_ok, worst_margin


def _first_ball_entry(profile: ControlProfile, av_positions: np.ndarray,
                      t_star: int, d_thres: float) -> int:
    """First step at which the seed is inside the collision ball of the AV.

    The collision constraint is existential; the step actually realized is the
    first in-ball step, which equals the constrained step for approaches from
    outside and precedes it when the seed glides alongside the AV.
    """
    n = min(profile.p.shape[0] - 1, av_positions.shape[0] - 1)
    for t in range(1, n + 1):
        d = float(np.linalg.norm(profile.p[t] - av_positions[t]))
        if d <= d_thres:
            return t
    return t_star


def solve_intention(
    scenario: Scenario,
    av_candidates: list[AvCandidate],
    prior: KinematicPrior,
    limits: KinematicLimits,
    config: IntentionConfig = IntentionConfig(),
    raw: bool = False,
) -> AdversarialIntention | None:
    """Search (candidate x collision step x corridor) for the best feasible attack.

    Returns the intention with the maximum realism objective among feasible
    solutions, ties broken toward the earliest collision step, then candidate
    and corridor order. Returns None when every combination is infeasible.
    With ``raw=True`` the winner skips tight re-solving, post-checks, and
    repair; this is the ablation path, not the production one.
    """
    ov = scenario.ov
    if ov is None:
        raise ValueError("scenario has no opponent vehicle")
    h = scenario.history_steps
    if h < 2:
        raise ValueError("opponent needs at least 2 history states to seed velocity")
    steps = scenario.future_steps
    p0, v0, a0 = _finite_difference_state(ov.trajectory, h)
    speed = float(np.linalg.norm(v0))
    heading0 = float(ov.trajectory.headings[h])

    av_path = av_candidates[0].positions()[1:]
    corridors = enumerate_corridors(scenario, config.max_corridors, steps, av_path)
    area = kinematics.drivable_area(scenario.map)

    t_min = max(1, int(math.ceil(config.t_min_seconds / scenario.dt)))
    radius_solve = max(limits.d_thres - config.exec_margin, 0.5 * limits.d_thres)
    reach = np.array([reachable_distance(t, scenario.dt, speed, limits) for t in range(steps + 1)])

    accel_weight = 1.0 / (2.0 * prior.accel_var)
    jerk_weight = prior.lam / (2.0 * prior.jerk_var)

    def corridor_halfspaces(corridor: Corridor) -> tuple[solver.Halfspace, ...]:
        out = []
        for hs in corridor.halfspaces():
            if hs.step == steps:
                hs = solver.Halfspace(step=hs.step, normal=hs.normal,
                                      offset=hs.offset - config.goal_margin)
            out.append(hs)
        return tuple(out)

    results: list[tuple[float, int, int, int, object]] = []
    stop = False
    for corridor_idx, corridor in enumerate(corridors):
        base = solver.InnerProblem(
            horizon=steps,
            dt=scenario.dt,
            p0=p0, v0=v0, a0=a0,
            accel_weight=accel_weight, accel_target=prior.accel_mean,
            jerk_weight=jerk_weight, jerk_target=prior.jerk_mean,
            v_max=limits.v_max, a_max=limits.a_max,
            halfspaces=corridor_halfspaces(corridor),
        )
        sweep = solver.TerminalSweepSolver(
            base, tol=config.search_tol, max_iter=config.search_max_iter,
            rho=config.rho, eps_dual=config.search_eps_dual,
        )
        for cand_idx, cand in enumerate(av_candidates):
            av_pos = cand.positions()
            warm = None
            for t_star in range(t_min, steps + 1):
                center = av_pos[t_star]
                need = float(np.linalg.norm(center - p0)) - radius_solve
                if need > reach[t_star] - config.reach_margin:
                    continue
                if corridor.slab_depth(t_star, center, radius_solve) < config.min_lens_depth:
                    continue
                sol = sweep.solve_terminal(t_star, center, radius_solve, warm_start=warm)
                warm = sol.warm_data
                if sol.status != solver.STATUS_OPTIMAL:
                    continue
                obj = _objective(prior, sol.profile)
                results.append((obj, t_star, cand_idx, corridor_idx, sol))
                if config.good_enough_objective is not None and obj >= config.good_enough_objective:
                    stop = True
                    break
            if stop:
                break
        if stop:
            break

    if not results:
        return None
    # max objective; ties -> earliest collision step, then candidate, then corridor.
    # Near-ties (within the relative epsilon) are resolved as ties: attacks that
    # are equally realistic should collide as early as possible.
    best_obj = max(r[0] for r in results)
    tie_eps = config.tie_epsilon_rel * abs(best_obj) + 1e-9
    ties = sorted((r for r in results if r[0] >= best_obj - tie_eps),
                  key=lambda r: (r[1], r[2], r[3]))
    rest = sorted((r for r in results if r[0] < best_obj - tie_eps),
                  key=lambda r: (-r[0], r[1], r[2], r[3]))
    results = ties + rest

    for attempt, (obj_est, t_star, cand_idx, corridor_idx, search_sol) in enumerate(results):
        if attempt >= config.max_final_attempts:
            break
        corridor = corridors[corridor_idx]
        center = av_candidates[cand_idx].positions()[t_star]
        problem = solver.InnerProblem(
            horizon=steps,
            dt=scenario.dt,
            p0=p0, v0=v0, a0=a0,
            accel_weight=accel_weight, accel_target=prior.accel_mean,
            jerk_weight=jerk_weight, jerk_target=prior.jerk_mean,
            v_max=limits.v_max, a_max=limits.a_max,
            halfspaces=corridor_halfspaces(corridor),
            terminal_step=t_star, terminal_center=center, terminal_radius=radius_solve,
        )
        if raw:
            profile = search_sol.profile
            entry = _first_ball_entry(profile, av_candidates[cand_idx].positions(), t_star, limits.d_thres)
            return AdversarialIntention(
                goal=profile.p[-1], collision_step=entry, seed_profile=profile,
                objective_value=_objective(prior, profile),
                av_candidate=av_candidates[cand_idx].source,
                corridor=corridor.lane_ids,
            )
        sol = solver.solve(problem, tol=config.tol, max_iter=config.max_iter,
                           rho=config.rho, warm_start=search_sol.warm_data)
        if sol.status != solver.STATUS_OPTIMAL:
            continue
        ok, heading_ok, worst_margin = _post_check(
            sol.profile, limits, area, center, t_star, limits.d_thres, heading0)
        if not ok:
            # one bounded repair: shrink control authority and pull the slab inward
            repaired = problem
            if not heading_ok:
                j_cap = 0.5 * float(np.linalg.norm(sol.profile.j, axis=1).max())
                repaired = replace(repaired, jerk_ball=max(j_cap, 1e-3))
            if worst_margin < -1e-3:
                shrink = -worst_margin + 2e-3
                tightened = tuple(
                    solver.Halfspace(step=hs.step, normal=hs.normal, offset=hs.offset - shrink)
                    for hs in repaired.halfspaces
                )
                repaired = replace(repaired, halfspaces=tightened)
            sol = solver.solve(repaired, tol=config.tol, max_iter=config.max_iter, rho=config.rho)
            if sol.status != solver.STATUS_OPTIMAL:
                continue
            ok, _, _ = _post_check(sol.profile, limits, area, center, t_star, limits.d_thres, heading0)
            if not ok:
                continue
        profile = sol.profile
        entry = _first_ball_entry(profile, av_candidates[cand_idx].positions(), t_star, limits.d_thres)
        return AdversarialIntention(
            goal=profile.p[-1], collision_step=entry, seed_profile=profile,
            objective_value=_objective(prior, profile),
            av_candidate=av_candidates[cand_idx].source,
            corridor=corridor.lane_ids,
        )
    return None


def heuristic_intention(
    scenario: Scenario,
    av_candidate: AvCandidate,
    seed: int = 0,
    t_min_seconds: float = 0.5,
) -> AdversarialIntention:
    """Ablation baseline: extrapolate through a randomly sampled AV point.

    A point on the estimated AV trajectory is sampled uniformly (seeded); the
    goal is the horizon endpoint of the ray from the opponent's position
    through that point, so the straight-line seed crosses the sampled point at
    its own timestamp. No feasibility or realism guarantees.
    """
    ov = scenario.ov
    if ov is None:
        raise ValueError("scenario has no opponent vehicle")
    h = scenario.history_steps
    steps = scenario.future_steps
    p0, v0, a0 = _finite_difference_state(ov.trajectory, h)

    rng = np.random.default_rng(seed)
    t_min = max(1, int(math.ceil(t_min_seconds / scenario.dt)))
    t_hi = max(min(steps, len(av_candidate.trajectory) - 1), t_min)
    t_star = int(rng.integers(t_min, t_hi + 1))
    sample = av_candidate.positions()[min(t_star, len(av_candidate.trajectory) - 1)]

    u = float(rng.uniform(0.0, 1.0))
    goal = p0 + u * (sample - p0)
    times = np.arange(steps + 1)[:, None] / steps
    positions = p0 + times * (goal - p0)
    v = np.vstack([v0, np.diff(positions, axis=0) / scenario.dt])
    a = np.vstack([a0, np.diff(v, axis=0) / scenario.dt])
    j = np.diff(a, axis=0) / scenario.dt
    profile = ControlProfile(dt=scenario.dt, p=positions, v=v, a=a, j=j)
    return AdversarialIntention(
        goal=goal, collision_step=t_star, seed_profile=profile,
        objective_value=float("nan"), av_candidate=av_candidate.source, corridor=(),
    )
