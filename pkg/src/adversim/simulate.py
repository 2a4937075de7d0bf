"""Closed-loop rollout engine.

Each replanning tick runs, in order: AV trajectory estimation, adversarial
intention search, opponent trajectory planning. Background vehicles re-evaluate
their reactive policy every integration step; the opponent executes its current
plan open-loop between ticks. The rollout terminates on the first AV footprint
collision or at the horizon end. All randomness is derived from the configured
seed, so a rollout is a pure function of (scenario, config).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from adversim import kinematics, planners
from adversim.intention import (
    AdversarialIntention,
    IntentionConfig,
    estimate_av_candidates,
    heuristic_intention,
    solve_intention,
)
from adversim.kinematics import KinematicLimits
from adversim.planners import IdmParams, PlanRequest, plan_learned, plan_quintic
from adversim.priors import KinematicPrior
from adversim.scenario import AgentState, Scenario, Trajectory, derive_route

MODE_OPEN = "open-loop"
MODE_CLOSED = "closed-loop"

INTENTION_OPTIMIZATION = "optimization"
INTENTION_HEURISTIC = "heuristic"
INTENTION_NONE = "none"

PLANNER_PLAYBACK = "playback"
PLANNER_RULE = "rule"

OV_PLANNER_QUINTIC = "quintic"
OV_PLANNER_LEARNED = "learned"
OV_PLANNER_SEED = "seed"  # execute the optimizer's seed profile directly (ablation)

TERMINATION_COLLISION = "collision"
TERMINATION_HORIZON = "horizon-end"
TERMINATION_AV_OFFROAD = "av-offroad"
TERMINATION_OV_OFFROAD = "ov-offroad"


@dataclass(frozen=True)
class SimConfig:
    replan_hz: float = 2.0
    mode: str = MODE_OPEN
    intention_mode: str = INTENTION_OPTIMIZATION
    planner: str = PLANNER_PLAYBACK
    ov_planner: str = OV_PLANNER_QUINTIC
    seed: int = 0
    limits: KinematicLimits = field(default_factory=KinematicLimits)
    intention: IntentionConfig = field(default_factory=IntentionConfig)
    learned_weights: "planners.LearnedPlannerWeights | None" = None
    raw_intention: bool = False  # ablation: skip post-checks on intentions
    record_details: bool = False  # keep seed profiles on intention records (in memory)

    def __post_init__(self):
        if self.mode not in (MODE_OPEN, MODE_CLOSED):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.intention_mode not in (INTENTION_OPTIMIZATION, INTENTION_HEURISTIC, INTENTION_NONE):
            raise ValueError(f"unknown intention_mode {self.intention_mode!r}")
        if self.planner not in (PLANNER_PLAYBACK, PLANNER_RULE):
            raise ValueError(f"unknown planner {self.planner!r}")
        if self.mode == MODE_OPEN and self.planner != PLANNER_PLAYBACK:
            raise ValueError("open-loop evaluation replays the logged AV")
        if self.ov_planner not in (OV_PLANNER_QUINTIC, OV_PLANNER_LEARNED, OV_PLANNER_SEED):
            raise ValueError(f"unknown ov_planner {self.ov_planner!r}")
        if self.ov_planner == OV_PLANNER_LEARNED and self.learned_weights is None:
            raise ValueError("ov_planner 'learned' requires learned_weights")


@dataclass(frozen=True)
class IntentionRecord:
    tick_step: int
    goal: tuple[float, float] | None
    collision_step: int | None  # absolute step index in the rollout
    objective: float | None
    av_candidate: str | None
    corridor: tuple[int, ...] | None
    fallback: bool
    # populated only when SimConfig.record_details is set; not serialized
    seed_profile: object = None
    av_positions: object = None
    relative_t_star: int | None = None


@dataclass(eq=False)
class RolloutLog:
    dt: float
    times: np.ndarray                 # (n,)
    states: dict[str, np.ndarray]     # id -> (n, 3)
    commands: dict[str, np.ndarray]   # id -> (n-1, 2) integrator accelerations
    termination: str
    collision_step: int | None
    intentions: list[IntentionRecord]
    tick_wall_times: list[float]
    final_ov_plan: np.ndarray | None  # (k, 2) positions beyond the last tick
    route: list[int]
    av_id: str
    ov_id: str | None
    seed: int
    fallback_ticks: list[int]
    footprints: dict[str, tuple[float, float]]

    @property
    def steps(self) -> int:
        return self.times.shape[0] - 1


@dataclass(frozen=True)
class RolloutFailure:
    error: str


class _Agent:
    __slots__ = ("record", "p", "v", "a", "heading", "desired_speed")

    def __init__(self, record, p, v, a, heading, desired_speed):
        self.record = record
        self.p = p
        self.v = v
        self.a = a
        self.heading = heading
        self.desired_speed = desired_speed


def _fd_state(traj: Trajectory, index: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    p = traj.positions[index].copy()
    v = (traj.positions[index] - traj.positions[index - 1]) / traj.dt if index >= 1 else np.zeros(2)
    if index >= 2:
        a = (traj.positions[index] - 2 * traj.positions[index - 1] + traj.positions[index - 2]) / traj.dt**2
    else:
        a = np.zeros(2)
    return p, v, a


def _tick_scenario(scenario: Scenario, sim_states: dict[str, list[np.ndarray]], step: int) -> Scenario:
    """Rolling view at the current step: short history (simulated states, padded
    from the raw log at the start) plus the remaining raw future."""
    h_raw = scenario.history_steps
    rem = scenario.future_steps - step
    agents = []
    for rec in scenario.agents:
        rows = list(rec.trajectory.states[:h_raw]) + sim_states[rec.id]
        hist = np.array(rows[-3:])
        future = rec.trajectory.states[h_raw + step + 1: h_raw + scenario.future_steps + 1]
        states = np.vstack([hist, future])
        traj = Trajectory(dt=scenario.dt, states=states, start_time=-(hist.shape[0] - 1) * scenario.dt)
        agents.append(replace(rec, trajectory=traj))
    return Scenario(
        agents=tuple(agents), map=scenario.map, dt=scenario.dt,
        history_horizon=2 * scenario.dt,
        future_horizon=rem * scenario.dt,
    )


def _rule_planner_rollout(scenario: Scenario, seed: int) -> Trajectory:
    """Black-box AV rollout in the raw scene: IDM + pursuit against logged futures."""
    h = scenario.history_steps
    steps = scenario.future_steps
    av = scenario.av
    route = derive_route(scenario, av.id)
    route_pts = np.vstack([scenario.map.lanes[i].points[:, :2] for i in route])
    p, v, a = _fd_state(av.trajectory, h)
    heading = float(av.trajectory.headings[h])
    limits = KinematicLimits()
    speeds = np.linalg.norm(np.diff(av.trajectory.positions, axis=0), axis=1) / scenario.dt
    params = IdmParams(desired_speed=max(float(speeds.mean()), 1.0))
    out = [np.array([p[0], p[1], heading])]
    for k in range(steps):
        neighbors = []
        for rec in scenario.agents:
            if rec.id == av.id:
                continue
            idx = min(h + k, len(rec.trajectory) - 1)
            nxt = min(idx + 1, len(rec.trajectory) - 1)
            vel = (rec.trajectory.positions[nxt] - rec.trajectory.positions[idx]) / scenario.dt \
                if nxt > idx else np.zeros(2)
            neighbors.append((rec.trajectory.state(idx), rec.length, rec.width, vel))
        cmd = planners.av_rule_planner_step(p, v, heading, route_pts, neighbors, limits, params)
        p = p + v * scenario.dt + 0.5 * cmd.acceleration * scenario.dt**2
        v = v + cmd.acceleration * scenario.dt
        a = cmd.acceleration
        heading = kinematics.heading_from_velocity(v, heading)
        out.append(np.array([p[0], p[1], heading]))
    return Trajectory(dt=scenario.dt, states=np.array(out))


def _nearest_lane_points(scenario: Scenario, p: np.ndarray) -> np.ndarray:
    dists = [kinematics.polyline_distance(lane.points[:, :2], p) for lane in scenario.map.lanes]
    return scenario.map.lanes[int(np.argmin(dists))].points[:, :2]


def _plan_toward(
    config: SimConfig, scenario: Scenario, agent: _Agent, goal: np.ndarray, rem_steps: int,
    terminal_speed: float | None = None,
    direction_hint: np.ndarray | None = None,
) -> kinematics.ControlProfile:
    lane_pts = _nearest_lane_points(scenario, goal)
    s_goal = kinematics.arc_progress(goal, lane_pts)
    _, tangent = kinematics.point_at_arclength(lane_pts, s_goal)
    # a lane tangent has no preferred orientation; keep it aligned with the
    # intended motion (or the agent's own heading)
    if direction_hint is None:
        direction_hint = np.array([math.cos(agent.heading), math.sin(agent.heading)])
    if float(tangent @ direction_hint) < 0.0:
        tangent = -tangent
    if terminal_speed is None:
        terminal_speed = min(float(np.linalg.norm(agent.v)), planners.DEFAULT_TERMINAL_SPEED)
    req = PlanRequest(
        position=agent.p, velocity=agent.v, acceleration=agent.a, heading=agent.heading,
        goal=goal, horizon_steps=rem_steps, dt=scenario.dt, limits=config.limits,
        terminal_speed=min(max(terminal_speed, 0.0), config.limits.v_max),
        terminal_direction=tangent,
    )
    if config.ov_planner == OV_PLANNER_LEARNED:
        return plan_learned(req, config.learned_weights)
    return plan_quintic(req)


def run_scenario(scenario: Scenario, config: SimConfig, prior: KinematicPrior) -> RolloutLog:
    """Roll one scenario to collision or horizon end. Deterministic given the seed."""
    dt = scenario.dt
    h_raw = scenario.history_steps
    total = scenario.future_steps
    replan_period = int(round(1.0 / (config.replan_hz * dt)))
    if abs(replan_period * config.replan_hz * dt - 1.0) > 1e-6:
        raise ValueError("replanning period must be divisible by dt")

    av_rec = scenario.av
    ov_rec = scenario.ov
    route = derive_route(scenario, av_rec.id)
    route_pts = np.vstack([scenario.map.lanes[i].points[:, :2] for i in route])

    agents: dict[str, _Agent] = {}
    for rec in scenario.agents:
        p, v, a = _fd_state(rec.trajectory, h_raw)
        speeds = np.linalg.norm(np.diff(rec.trajectory.positions, axis=0), axis=1) / dt
        agents[rec.id] = _Agent(rec, p, v, a, float(rec.trajectory.headings[h_raw]),
                                max(float(speeds.mean()), 1.0))

    sim_states: dict[str, list[np.ndarray]] = {
        rec.id: [np.array([agents[rec.id].p[0], agents[rec.id].p[1], agents[rec.id].heading])]
        for rec in scenario.agents
    }
    commands: dict[str, list[np.ndarray]] = {rec.id: [] for rec in scenario.agents}
    times = [0.0]
    intentions: list[IntentionRecord] = []
    tick_wall: list[float] = []
    fallback_ticks: list[int] = []
    ov_plan: kinematics.ControlProfile | None = None
    ov_plan_start = 0
    final_plan_positions: np.ndarray | None = None
    termination = TERMINATION_HORIZON
    collision_step = None

    def footprint_state(agent: _Agent) -> AgentState:
        return AgentState(agent.p[0], agent.p[1], agent.heading)

    for step in range(total):
        # ---- replanning tick: (1) AV estimation, (2) intention, (3) OV planning
        if step % replan_period == 0 and ov_rec is not None:
            tick_t0 = time.perf_counter()
            tick_sc = _tick_scenario(scenario, sim_states, step)
            rem = total - step
            ov_agent = agents[ov_rec.id]
            tick_seed = (config.seed * 1000003 + step) & 0x7FFFFFFF
            intent: AdversarialIntention | None = None
            if config.intention_mode == INTENTION_OPTIMIZATION:
                cands = estimate_av_candidates(
                    tick_sc, planner=_rule_planner_rollout,
                    k=config.intention.k_av_candidates, seed=tick_seed,
                    dedup_threshold=config.intention.dedup_threshold)
                intent = solve_intention(tick_sc, cands, prior, config.limits,
                                         config.intention, raw=config.raw_intention)
            elif config.intention_mode == INTENTION_HEURISTIC:
                cands = estimate_av_candidates(tick_sc, planner=None, k=1)
                intent = heuristic_intention(tick_sc, cands[0], seed=tick_seed,
                                             t_min_seconds=config.intention.t_min_seconds)

            if intent is not None:
                if config.ov_planner == OV_PLANNER_SEED:
                    ov_plan = intent.seed_profile
                else:
                    # pace the completion like the intention: same end speed,
                    # tangent oriented along the seed's final motion
                    seed_end_v = intent.seed_profile.v[-1]
                    seed_end_speed = float(np.linalg.norm(seed_end_v))
                    hint = seed_end_v if seed_end_speed > 0.3 else None
                    ov_plan = _plan_toward(config, tick_sc, ov_agent, intent.goal, rem,
                                           terminal_speed=seed_end_speed,
                                           direction_hint=hint)
                ov_plan_start = step
                detail = {}
                if config.record_details:
                    matching = next(c for c in cands if c.source == intent.av_candidate)
                    detail = dict(seed_profile=intent.seed_profile,
                                  av_positions=matching.positions(),
                                  relative_t_star=intent.collision_step)
                intentions.append(IntentionRecord(
                    tick_step=step, goal=(float(intent.goal[0]), float(intent.goal[1])),
                    collision_step=step + intent.collision_step,
                    objective=None if math.isnan(intent.objective_value) else float(intent.objective_value),
                    av_candidate=intent.av_candidate, corridor=intent.corridor, fallback=False,
                    **detail))
            else:
                # no feasible intention (or mode 'none'): complete toward the raw goal
                raw_goal = ov_rec.trajectory.positions[h_raw + total]
                ov_plan = _plan_toward(config, tick_sc, ov_agent, raw_goal, rem)
                ov_plan_start = step
                is_fallback = config.intention_mode != INTENTION_NONE
                if is_fallback:
                    fallback_ticks.append(step)
                intentions.append(IntentionRecord(
                    tick_step=step, goal=None, collision_step=None, objective=None,
                    av_candidate=None, corridor=None, fallback=is_fallback))
            final_plan_positions = np.asarray(ov_plan.p[1:], dtype=float)
            tick_wall.append(time.perf_counter() - tick_t0)

        # ---- integrate one dt step
        neighbors_of = {}
        for aid, agent in agents.items():
            neighbors_of[aid] = [
                (footprint_state(other), other.record.length, other.record.width, other.v.copy())
                for oid, other in agents.items() if oid != aid
            ]

        for aid, agent in agents.items():
            rec = agent.record
            if rec.role == "av" and config.planner == PLANNER_PLAYBACK:
                idx = min(h_raw + step + 1, len(rec.trajectory) - 1)
                nxt = rec.trajectory.states[idx]
                cmd_a = 2.0 * ((nxt[:2] - agent.p) / dt - agent.v) / dt  # exact replay accel
                agent.a = cmd_a
                agent.p = agent.p + agent.v * dt + 0.5 * cmd_a * dt * dt
                agent.v = agent.v + cmd_a * dt
                agent.heading = kinematics.heading_from_velocity(agent.v, agent.heading)
                commands[aid].append(cmd_a)
            elif rec.role == "av":
                cmd = planners.av_rule_planner_step(
                    agent.p, agent.v, agent.heading, route_pts, neighbors_of[aid], config.limits,
                    IdmParams(desired_speed=agent.desired_speed))
                agent.a = cmd.acceleration
                agent.p = agent.p + agent.v * dt + 0.5 * agent.a * dt * dt
                agent.v = agent.v + agent.a * dt
                agent.heading = kinematics.heading_from_velocity(agent.v, agent.heading)
                commands[aid].append(cmd.acceleration)
            elif rec.role == "ov" and ov_plan is not None:
                k = step - ov_plan_start
                jerk = ov_plan.j[k] if k < ov_plan.j.shape[0] else np.zeros(2)
                cmd_a = agent.a  # jerk command acts on the held acceleration
                agent.p = agent.p + agent.v * dt + 0.5 * agent.a * dt * dt
                agent.v = agent.v + agent.a * dt
                agent.a = agent.a + jerk * dt
                agent.heading = kinematics.heading_from_velocity(agent.v, agent.heading)
                commands[aid].append(cmd_a)
            elif rec.role == "ov":
                idx = min(h_raw + step + 1, len(rec.trajectory) - 1)
                nxt = rec.trajectory.states[idx]
                cmd_a = 2.0 * ((nxt[:2] - agent.p) / dt - agent.v) / dt
                agent.a = cmd_a
                agent.p = agent.p + agent.v * dt + 0.5 * cmd_a * dt * dt
                agent.v = agent.v + cmd_a * dt
                agent.heading = kinematics.heading_from_velocity(agent.v, agent.heading)
                commands[aid].append(cmd_a)
            else:  # background vehicle: reactive every step
                lane_pts = _nearest_lane_points(scenario, agent.p)
                cmd = planners.bv_policy_step(
                    agent.p, agent.v, agent.heading, lane_pts, neighbors_of[aid], config.limits,
                    IdmParams(desired_speed=agent.desired_speed))
                agent.a = cmd.acceleration
                agent.p = agent.p + agent.v * dt + 0.5 * agent.a * dt * dt
                agent.v = agent.v + agent.a * dt
                agent.heading = kinematics.heading_from_velocity(agent.v, agent.heading)
                commands[aid].append(cmd.acceleration)

        for aid, agent in agents.items():
            sim_states[aid].append(np.array([agent.p[0], agent.p[1], agent.heading]))
        times.append((step + 1) * dt)

        av_agent = agents[av_rec.id]
        av_state = footprint_state(av_agent)
        collided = False
        for aid, agent in agents.items():
            if aid == av_rec.id:
                continue
            if kinematics.obb_overlap(av_state, av_rec.length, av_rec.width,
                                      footprint_state(agent), agent.record.length, agent.record.width):
                collided = True
                break
        if collided:
            termination = TERMINATION_COLLISION
            collision_step = step + 1
            break

    return RolloutLog(
        dt=dt,
        times=np.array(times),
        states={aid: np.array(rows) for aid, rows in sim_states.items()},
        commands={aid: np.array(rows) if rows else np.zeros((0, 2)) for aid, rows in commands.items()},
        termination=termination,
        collision_step=collision_step,
        intentions=intentions,
        tick_wall_times=tick_wall,
        final_ov_plan=final_plan_positions,
        route=route,
        av_id=av_rec.id,
        ov_id=ov_rec.id if ov_rec else None,
        seed=config.seed,
        fallback_ticks=fallback_ticks,
        footprints={rec.id: (rec.length, rec.width) for rec in scenario.agents},
    )


def scenario_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0] & 0x7FFFFFFF)


def _run_one(args):
    scenario, config, prior, index = args
    cfg = replace(config, seed=scenario_seed(config.seed, index))
    try:
        return run_scenario(scenario, cfg, prior)
    except Exception as err:  # captured in-slot, the batch continues
        return RolloutFailure(error=f"{type(err).__name__}: {err}")


def batch_run(
    scenarios: list[Scenario],
    config: SimConfig,
    prior: KinematicPrior,
    jobs: int = 1,
) -> list[RolloutLog | RolloutFailure]:
    """Run scenarios with per-index seeds; output order matches input order."""
    if not scenarios:
        raise ValueError("batch_run requires at least one scenario")
    tasks = [(sc, config, prior, i) for i, sc in enumerate(scenarios)]
    if jobs <= 1 or len(scenarios) == 1:
        return [_run_one(t) for t in tasks]
    import multiprocessing as mp

    with mp.get_context("fork").Pool(processes=jobs) as pool:
        return list(pool.imap(_run_one, tasks, chunksize=1))


# ---------------------------------------------------------------------------
# Persistence: JSON lines, one record per step plus a footer
# ---------------------------------------------------------------------------


def save_log(log: RolloutLog) -> bytes:
    lines = []
    ids = sorted(log.states)
    for i, t in enumerate(log.times):
        rec = {"t": round(float(t), 9), "agents": {aid: log.states[aid][i].tolist() for aid in ids}}
        lines.append(json.dumps(rec))
    footer = {
        "footer": True,
        "termination": log.termination,
        "collision_step": log.collision_step,
        "av_id": log.av_id,
        "ov_id": log.ov_id,
        "seed": log.seed,
        "route": list(log.route),
        "fallback_ticks": list(log.fallback_ticks),
        "final_ov_plan": log.final_ov_plan.tolist() if log.final_ov_plan is not None else None,
        "footprints": {aid: list(fp) for aid, fp in sorted(log.footprints.items())},
        "intentions": [
            {
                "tick_step": r.tick_step, "goal": list(r.goal) if r.goal else None,
                "collision_step": r.collision_step, "objective": r.objective,
                "av_candidate": r.av_candidate,
                "corridor": list(r.corridor) if r.corridor else None,
                "fallback": r.fallback,
            }
            for r in log.intentions
        ],
        "tick_wall_times": [round(float(w), 6) for w in log.tick_wall_times],
        "dt": log.dt,
    }
    lines.append(json.dumps(footer))
    return ("\n".join(lines) + "\n").encode("utf-8")


def load_log(data: bytes | str) -> RolloutLog:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    lines = [json.loads(line) for line in data.strip().splitlines()]
    footer = lines[-1]
    if not footer.get("footer"):
        raise ValueError("rollout log is missing its footer record")
    steps = lines[:-1]
    ids = sorted(steps[0]["agents"])
    states = {aid: np.array([s["agents"][aid] for s in steps]) for aid in ids}
    return RolloutLog(
        dt=float(footer["dt"]),
        times=np.array([s["t"] for s in steps]),
        states=states,
        commands={},
        termination=footer["termination"],
        collision_step=footer["collision_step"],
        intentions=[
            IntentionRecord(
                tick_step=r["tick_step"],
                goal=tuple(r["goal"]) if r["goal"] else None,
                collision_step=r["collision_step"],
                objective=r["objective"],
                av_candidate=r["av_candidate"],
                corridor=tuple(r["corridor"]) if r["corridor"] else None,
                fallback=r["fallback"],
            )
            for r in footer["intentions"]
        ],
        tick_wall_times=list(footer["tick_wall_times"]),
        final_ov_plan=np.array(footer["final_ov_plan"]) if footer["final_ov_plan"] else None,
        route=list(footer["route"]),
        av_id=footer["av_id"],
        ov_id=footer["ov_id"],
        seed=footer["seed"],
        fallback_ticks=list(footer["fallback_ticks"]),
        footprints={aid: (fp[0], fp[1]) for aid, fp in footer["footprints"].items()},
    )
