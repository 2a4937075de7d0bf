"""Scenario representation: agents, lane map, pose algebra, JSON IO, synthetic generation.

A scenario bundles the logged trajectories of all agents (one AV, at most one
OV, any number of BVs) with a polyline lane map and the time base used by the
simulator. Scenario values are immutable after construction and safe to share
across workers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

ROLE_AV = "av"
ROLE_OV = "ov"
ROLE_BV = "bv"
ROLES = (ROLE_AV, ROLE_OV, ROLE_BV)

DEFAULT_LENGTH = 4.5
DEFAULT_WIDTH = 2.0


class ScenarioError(ValueError):
    """Validation failure with the offending field path."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


def wrap_angle(theta: float) -> float:
    """Normalize an angle into (-pi, pi]."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorized wrap into (-pi, pi]."""
    wrapped = np.mod(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi)
    wrapped = np.where(wrapped <= 0.0, wrapped + 2.0 * np.pi, wrapped)
    return wrapped - np.pi


@dataclass(frozen=True)
class AgentState:
    """Planar pose: position in meters, heading in radians, wrapped to (-pi, pi]."""

    x: float
    y: float
    heading: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.heading)):
            raise ScenarioError("non-finite pose component")
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class PoseDelta:
    """Relative descriptor between two coordinate frames: raw component differences."""

    dx: float
    dy: float
    dtheta: float

    def __post_init__(self):
        object.__setattr__(self, "dtheta", wrap_angle(self.dtheta))


def pose_delta(frame_a: AgentState, frame_b: AgentState) -> PoseDelta:
    """Component-wise difference a - b with the angle wrapped."""
    return PoseDelta(frame_a.x - frame_b.x, frame_a.y - frame_b.y, frame_a.heading - frame_b.heading)


def to_local_frame(point: AgentState, frame: AgentState) -> AgentState:
    """Express ``point`` in the coordinate system anchored at ``frame``."""
    c, s = math.cos(frame.heading), math.sin(frame.heading)
    dx, dy = point.x - frame.x, point.y - frame.y
    return AgentState(c * dx + s * dy, -s * dx + c * dy, point.heading - frame.heading)


def from_local_frame(point: AgentState, frame: AgentState) -> AgentState:
    """Inverse of :func:`to_local_frame`."""
    c, s = math.cos(frame.heading), math.sin(frame.heading)
    return AgentState(
        frame.x + c * point.x - s * point.y,
        frame.y + s * point.x + c * point.y,
        point.heading + frame.heading,
    )


def points_to_local(points: np.ndarray, frame: AgentState) -> np.ndarray:
    """Rigid transform of an (N, 2) position array into ``frame`` coordinates."""
    c, s = math.cos(frame.heading), math.sin(frame.heading)
    d = np.asarray(points, dtype=float) - [frame.x, frame.y]
    return d @ np.array([[c, -s], [s, c]])


def points_from_local(points: np.ndarray, frame: AgentState) -> np.ndarray:
    c, s = math.cos(frame.heading), math.sin(frame.heading)
    p = np.asarray(points, dtype=float)
    return p @ np.array([[c, s], [-s, c]]) + [frame.x, frame.y]


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Uniformly sampled pose sequence. ``states`` is an (N, 3) array of x, y, heading."""

    dt: float
    states: np.ndarray
    start_time: float = 0.0

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim != 2 or states.shape[1] != 3 or states.shape[0] == 0:
            raise ScenarioError("states must be a non-empty (N, 3) array", "trajectory.states")
        if not np.all(np.isfinite(states)):
            raise ScenarioError("non-finite state", "trajectory.states")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ScenarioError("dt must be positive", "trajectory.dt")
        states = states.copy()
        states[:, 2] = wrap_angles(states[:, 2])
        states.setflags(write=False)
        object.__setattr__(self, "states", states)

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :2]

    @property
    def headings(self) -> np.ndarray:
        return self.states[:, 2]

    def state(self, i: int) -> AgentState:
        x, y, h = self.states[i]
        return AgentState(x, y, h)

    def time_of(self, i: int) -> float:
        return self.start_time + i * self.dt


@dataclass(frozen=True, eq=False)
class AgentRecord:
    id: str
    role: str
    trajectory: Trajectory
    length: float = DEFAULT_LENGTH
    width: float = DEFAULT_WIDTH

    def __post_init__(self):
        if self.role not in ROLES:
            raise ScenarioError(f"unknown role {self.role!r}", f"agent[{self.id}].role")
        if not (self.length > 0 and self.width > 0):
            raise ScenarioError("footprint must be positive", f"agent[{self.id}]")


@dataclass(frozen=True, eq=False)
class Lane:
    """Directed centerline polyline with a constant drivable width."""

    points: np.ndarray  # (N, 3): x, y, heading
    width: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 2:
            raise ScenarioError("lane needs >= 2 (x, y, heading) points", "lane.points")
        if not np.all(np.isfinite(pts)):
            raise ScenarioError("non-finite lane point", "lane.points")
        seg = np.diff(pts[:, :2], axis=0)
        if np.any(np.hypot(seg[:, 0], seg[:, 1]) < 1e-9):
            raise ScenarioError("consecutive lane points must be distinct", "lane.points")
        if not (self.width > 0):
            raise ScenarioError("lane width must be positive", "lane.width")
        pts = pts.copy()
        pts[:, 2] = wrap_angles(pts[:, 2])
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def length(self) -> float:
        seg = np.diff(self.points[:, :2], axis=0)
        return float(np.hypot(seg[:, 0], seg[:, 1]).sum())


@dataclass(frozen=True, eq=False)
class MapModel:
    lanes: tuple[Lane, ...]

    def __post_init__(self):
        object.__setattr__(self, "lanes", tuple(self.lanes))


@dataclass(frozen=True, eq=False)
class Scenario:
    agents: tuple[AgentRecord, ...]
    map: MapModel
    dt: float
    history_horizon: float
    future_horizon: float

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        if self.dt <= 0:
            raise ScenarioError("dt must be positive", "dt")
        for name, horizon in (("history_horizon", self.history_horizon), ("future_horizon", self.future_horizon)):
            steps = horizon / self.dt
            if abs(steps - round(steps)) > 1e-6:
                raise ScenarioError(f"{name} not divisible by dt", name)
        av_ids = [a.id for a in self.agents if a.role == ROLE_AV]
        if len(av_ids) != 1:
            raise ScenarioError(
                f"exactly one agent must have role 'av', found {len(av_ids)}", "agents.role"
            )
        ov_ids = [a.id for a in self.agents if a.role == ROLE_OV]
        if len(ov_ids) > 1:
            raise ScenarioError(f"at most one agent may have role 'ov', found {len(ov_ids)}", "agents.role")
        seen: set[str] = set()
        for i, a in enumerate(self.agents):
            if a.id in seen:
                raise ScenarioError(f"duplicate agent id {a.id!r}", f"agents[{i}].id")
            seen.add(a.id)
            if abs(a.trajectory.dt - self.dt) > 1e-9:
                raise ScenarioError("trajectory dt differs from scenario dt", f"agents[{i}].trajectory.dt")

    @property
    def history_steps(self) -> int:
        return int(round(self.history_horizon / self.dt))

    @property
    def future_steps(self) -> int:
        return int(round(self.future_horizon / self.dt))

    @property
    def av(self) -> AgentRecord:
        return next(a for a in self.agents if a.role == ROLE_AV)

    @property
    def ov(self) -> AgentRecord | None:
        return next((a for a in self.agents if a.role == ROLE_OV), None)

    @property
    def bvs(self) -> list[AgentRecord]:
        return [a for a in self.agents if a.role == ROLE_BV]

    def agent(self, agent_id: str) -> AgentRecord:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise KeyError(agent_id)


# ---------------------------------------------------------------------------
# Serialization (UTF-8 JSON, SI units, headings in radians)
# ---------------------------------------------------------------------------


def _require(doc: dict, key: str, kind, path: str):
    if key not in doc:
        raise ScenarioError(f"missing key {key!r}", path)
    value = doc[key]
    if kind is float:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ScenarioError(f"expected number, got {type(value).__name__}", f"{path}.{key}")
        return float(value)
    if not isinstance(value, kind):
        raise ScenarioError(f"expected {kind.__name__}, got {type(value).__name__}", f"{path}.{key}")
    return value


def _parse_pose_rows(raw, path: str) -> np.ndarray:
    if not isinstance(raw, list) or not raw:
        raise ScenarioError("expected non-empty list of [x, y, heading] rows", path)
    rows = []
    for i, row in enumerate(raw):
        if not isinstance(row, list) or len(row) != 3:
            raise ScenarioError("expected [x, y, heading]", f"{path}[{i}]")
        for j, v in enumerate(row):
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
                raise ScenarioError("expected finite number", f"{path}[{i}][{j}]")
        rows.append([float(v) for v in row])
    return np.array(rows, dtype=float)


def scenario_from_dict(doc: dict) -> Scenario:
    if not isinstance(doc, dict):
        raise ScenarioError("top level must be an object")
    dt = _require(doc, "dt", float, "")
    history = _require(doc, "history_horizon", float, "")
    future = _require(doc, "future_horizon", float, "")
    agents_raw = _require(doc, "agents", list, "")
    map_raw = _require(doc, "map", dict, "")

    agents = []
    for i, a in enumerate(agents_raw):
        path = f"agents[{i}]"
        if not isinstance(a, dict):
            raise ScenarioError("agent must be an object", path)
        agent_id = _require(a, "id", str, path)
        role = _require(a, "role", str, path)
        length = _require(a, "length", float, path)
        width = _require(a, "width", float, path)
        traj_raw = _require(a, "trajectory", dict, path)
        start_time = _require(traj_raw, "start_time", float, f"{path}.trajectory")
        states = _parse_pose_rows(traj_raw.get("states"), f"{path}.trajectory.states")
        try:
            traj = Trajectory(dt=dt, states=states, start_time=start_time)
            agents.append(AgentRecord(id=agent_id, role=role, trajectory=traj, length=length, width=width))
        except ScenarioError as err:
            raise ScenarioError(str(err), path) from err

    lanes = []
    lanes_raw = _require(map_raw, "lanes", list, "map")
    for i, lane in enumerate(lanes_raw):
        path = f"map.lanes[{i}]"
        if not isinstance(lane, dict):
            raise ScenarioError("lane must be an object", path)
        width = _require(lane, "width", float, path)
        points = _parse_pose_rows(lane.get("points"), f"{path}.points")
        try:
            lanes.append(Lane(points=points, width=width))
        except ScenarioError as err:
            raise ScenarioError(str(err), path) from err

    return Scenario(
        agents=tuple(agents),
        map=MapModel(lanes=tuple(lanes)),
        dt=dt,
        history_horizon=history,
        future_horizon=future,
    )


def scenario_to_dict(scenario: Scenario) -> dict:
    return {
        "dt": scenario.dt,
        "history_horizon": scenario.history_horizon,
        "future_horizon": scenario.future_horizon,
        "agents": [
            {
                "id": a.id,
                "role": a.role,
                "length": a.length,
                "width": a.width,
                "trajectory": {
                    "start_time": a.trajectory.start_time,
                    "states": a.trajectory.states.tolist(),
                },
            }
            for a in scenario.agents
        ],
        "map": {
            "lanes": [
                {"width": lane.width, "points": lane.points.tolist()} for lane in scenario.map.lanes
            ]
        },
    }


def load_scenario(data: bytes | str) -> Scenario:
    """Parse and validate a scenario document; errors carry the failing field path."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as err:
        raise ScenarioError(f"malformed JSON: {err}") from err
    return scenario_from_dict(doc)


def save_scenario(scenario: Scenario) -> bytes:
    return json.dumps(scenario_to_dict(scenario)).encode("utf-8")


# ---------------------------------------------------------------------------
# Routes and opponent selection
# ---------------------------------------------------------------------------


def nearest_lane(map_model: MapModel, point: np.ndarray) -> int:
    """Index of the lane whose centerline is closest to ``point``."""
    from adversim import kinematics

    dists = [kinematics.polyline_distance(lane.points[:, :2], point) for lane in map_model.lanes]
    return int(np.argmin(dists))


def derive_route(scenario: Scenario, agent_id: str) -> list[int]:
    """Lane index chain visited by the agent's logged trajectory, in visit order."""
    agent = scenario.agent(agent_id)
    route: list[int] = []
    for p in agent.trajectory.positions:
        idx = nearest_lane(scenario.map, p)
        if not route or route[-1] != idx:
            if idx in route:
                continue  # re-entering a visited lane keeps the original chain
            route.append(idx)
    return route


def select_opponent(agents: list[AgentRecord]) -> str:
    """Pick the non-AV agent with minimum time-headway to the AV in the raw log."""
    av = next(a for a in agents if a.role == ROLE_AV)
    av_pos = av.trajectory.positions
    best_id, best_headway = None, math.inf
    speeds = np.linalg.norm(np.diff(av_pos, axis=0), axis=1) / av.trajectory.dt
    speeds = np.maximum(np.append(speeds, speeds[-1] if speeds.size else 0.0), 0.1)
    for a in agents:
        if a.role == ROLE_AV:
            continue
        n = min(len(a.trajectory), len(av.trajectory))
        gaps = np.linalg.norm(a.trajectory.positions[:n] - av_pos[:n], axis=1)
        headway = float(np.min(gaps / speeds[:n]))
        if headway < best_headway:
            best_headway, best_id = headway, a.id
    if best_id is None:
        raise ScenarioError("no non-AV agent available for opponent selection", "agents")
    return best_id


# ---------------------------------------------------------------------------
# Synthetic scenario generation
# ---------------------------------------------------------------------------

TEMPLATES = ("straight-following", "adjacent-lane", "intersection-crossing", "oncoming")

_LANE_WIDTH = 3.5
_HISTORY = 1.0
_FUTURE = 6.0
_DT = 0.1


def _straight_lane(start: np.ndarray, heading: float, length: float, width: float = _LANE_WIDTH) -> Lane:
    n = max(2, int(length // 15) + 1)
    s = np.linspace(0.0, length, n)
    direction = np.array([math.cos(heading), math.sin(heading)])
    pts = np.column_stack([start[0] + s * direction[0], start[1] + s * direction[1], np.full(n, heading)])
    return Lane(points=pts, width=width)


def _lane_trajectory(
    lane: Lane, s0: float, speed: float, rng: np.random.Generator, n_steps: int, wiggle: float = 0.3
) -> Trajectory:
    """Integrator-consistent 1-D motion along a straight lane with a mild speed wiggle."""
    heading = float(lane.points[0, 2])
    direction = np.array([math.cos(heading), math.sin(heading)])
    period = rng.uniform(2.0, 5.0)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    amp = rng.uniform(0.0, wiggle)
    t = np.arange(n_steps) * _DT
    accel = amp * np.sin(2.0 * math.pi * t / period + phase)

    s = np.empty(n_steps + 1)
    v = np.empty(n_steps + 1)
    s[0], v[0] = s0, speed
    for k in range(n_steps):
        s[k + 1] = s[k] + v[k] * _DT + 0.5 * accel[k] * _DT * _DT
        v[k + 1] = v[k] + accel[k] * _DT
    origin = lane.points[0, :2]
    xy = origin[None, :] + s[:, None] * direction[None, :]
    states = np.column_stack([xy, np.full(n_steps + 1, heading)])
    return Trajectory(dt=_DT, states=states, start_time=-_HISTORY)


def synth_scenario(seed: int, template: str) -> Scenario:
    """Deterministic regular (non-colliding) scenario for the given template."""
    if template not in TEMPLATES:
        raise ScenarioError(f"unknown template {template!r}; expected one of {TEMPLATES}")
    rng = np.random.default_rng([seed, TEMPLATES.index(template)])
    n_steps = int(round((_HISTORY + _FUTURE) / _DT))

    agents: list[AgentRecord] = []
    if template == "straight-following":
        lane0 = _straight_lane(np.array([-40.0, 0.0]), 0.0, 230.0)
        lane1 = _straight_lane(np.array([-40.0, _LANE_WIDTH]), 0.0, 230.0)
        lanes = (lane0, lane1)
        av_speed = rng.uniform(8.0, 12.0)
        av_s0 = rng.uniform(70.0, 80.0)
        gap = rng.uniform(18.0, 26.0)
        ov_speed = av_speed + rng.uniform(-0.5, 1.0)
        agents.append(("av", lane0, av_s0, av_speed))
        agents.append(("ov", lane0, av_s0 - gap, ov_speed))
        n_bv = int(rng.integers(0, 3))
        bv_s = av_s0 - 10.0
        for _ in range(n_bv):
            bv_s -= rng.uniform(28.0, 45.0)
            if bv_s < 5.0:
                break
            agents.append(("bv", lane1, bv_s, rng.uniform(7.0, 11.0)))
    elif template == "adjacent-lane":
        lane0 = _straight_lane(np.array([-40.0, 0.0]), 0.0, 230.0)
        lane1 = _straight_lane(np.array([-40.0, _LANE_WIDTH]), 0.0, 230.0)
        lanes = (lane0, lane1)
        av_speed = rng.uniform(8.0, 12.0)
        av_s0 = rng.uniform(70.0, 80.0)
        agents.append(("av", lane0, av_s0, av_speed))
        # neighbor lane with a clear speed differential: the abreast window is
        # transient, so the cut-in must be timed
        sign = 1.0 if rng.random() < 0.5 else -1.0
        ov_speed = av_speed + sign * rng.uniform(1.2, 2.2)
        ov_s0 = av_s0 - sign * rng.uniform(4.0, 10.0)
        agents.append(("ov", lane1, ov_s0, ov_speed))
        n_bv = int(rng.integers(0, 3))
        bv_s = av_s0 - 35.0
        for _ in range(n_bv):
            bv_s -= rng.uniform(28.0, 45.0)
            if bv_s < 5.0:
                break
            agents.append(("bv", lane1, bv_s, rng.uniform(7.0, 11.0)))
    elif template == "intersection-crossing":
        lane0 = _straight_lane(np.array([-80.0, 0.0]), 0.0, 200.0)
        lane1 = _straight_lane(np.array([0.0, -80.0]), math.pi / 2.0, 200.0)
        lanes = (lane0, lane1)
        av_speed = rng.uniform(8.0, 11.0)
        t_cross_av = rng.uniform(3.5, 5.0)  # from trajectory start (history included)
        av_s0 = 80.0 - av_speed * t_cross_av  # arclength of origin is 80
        ov_speed = rng.uniform(8.0, 11.0)
        dt_cross = rng.uniform(1.2, 2.0) * (1.0 if rng.random() < 0.5 else -1.0)
        t_cross_ov = np.clip(t_cross_av + dt_cross, 1.5, 6.5)
        ov_s0 = 80.0 - ov_speed * t_cross_ov
        agents.append(("av", lane0, av_s0, av_speed))
        agents.append(("ov", lane1, ov_s0, ov_speed))
        n_bv = int(rng.integers(0, 2))
        for _ in range(n_bv):
            bv_s = av_s0 - rng.uniform(30.0, 50.0)
            if bv_s >= 5.0:
                agents.append(("bv", lane0, bv_s, rng.uniform(7.0, 10.0)))
    else:  # oncoming
        lane0 = _straight_lane(np.array([-40.0, 0.0]), 0.0, 230.0)
        lane1 = _straight_lane(np.array([190.0, _LANE_WIDTH]), math.pi, 230.0)
        lanes = (lane0, lane1)
        av_speed = rng.uniform(8.0, 12.0)
        av_s0 = rng.uniform(70.0, 80.0)
        agents.append(("av", lane0, av_s0, av_speed))
        ov_ahead = rng.uniform(55.0, 85.0)
        # lane1 runs in -x; its arclength origin sits at x = 190
        ov_s0 = 190.0 - (av_s0 - 40.0 + ov_ahead)
        agents.append(("ov", lane1, ov_s0, rng.uniform(7.0, 10.0)))
        if rng.random() < 0.5:
            bv_s = ov_s0 - rng.uniform(30.0, 50.0)
            if bv_s >= 5.0:
                agents.append(("bv", lane1, bv_s, rng.uniform(6.0, 9.0)))

    records = []
    counters = {"av": 0, "ov": 0, "bv": 0}
    for role, lane, s0, speed in agents:
        counters[role] += 1
        agent_id = role if role != "bv" else f"bv{counters['bv']}"
        records.append(
            AgentRecord(
                id=agent_id,
                role=role,
                trajectory=_lane_trajectory(lane, s0, speed, rng, n_steps),
            )
        )

    # the designated opponent must coincide with the min-headway selection rule
    chosen = select_opponent(records)
    if chosen != "ov":
        relabeled = []
        for rec in records:
            if rec.id == chosen:
                relabeled.append(AgentRecord(id=rec.id, role=ROLE_OV, trajectory=rec.trajectory,
                                             length=rec.length, width=rec.width))
            elif rec.role == ROLE_OV:
                relabeled.append(AgentRecord(id=rec.id, role=ROLE_BV, trajectory=rec.trajectory,
                                             length=rec.length, width=rec.width))
            else:
                relabeled.append(rec)
        records = relabeled

    scenario = Scenario(
        agents=tuple(records),
        map=MapModel(lanes=lanes),
        dt=_DT,
        history_horizon=_HISTORY,
        future_horizon=_FUTURE,
    )
    _check_regular(scenario)
    return scenario


def _check_regular(scenario: Scenario) -> None:
    """Raw logs must be collision-free for the AV and keep every agent on the road."""
    from adversim import kinematics

    av = scenario.av
    for other in scenario.agents:
        if other.id == av.id:
            continue
        n = min(len(av.trajectory), len(other.trajectory))
        for t in range(n):
            if kinematics.obb_overlap(
                av.trajectory.state(t), av.length, av.width,
                other.trajectory.state(t), other.length, other.width,
            ):
                raise ScenarioError(f"generated log collides at step {t} with {other.id}", "synth")
    area = kinematics.DrivableArea(scenario.map)
    for agent in scenario.agents:
        margins = area.margin_many(agent.trajectory.positions)
        if np.min(margins) < 0.0:
            raise ScenarioError(f"agent {agent.id} leaves the road in the raw log", "synth")
