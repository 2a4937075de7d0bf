"""Motion completion and agent policies.

Stage 2 of the pipeline: given a goal position, fill in the trajectory that
reaches it. The analytic path is a per-axis quintic (minimum-jerk) polynomial;
the learned path is a small goal-conditioned network evaluated from a portable
weight file. Background vehicles follow an IDM-style car-following law with
lookahead-point lane keeping, and the rule-based AV planner adds a route.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from adversim import kinematics
from adversim.kinematics import ControlProfile, KinematicLimits
from adversim.scenario import AgentState, points_from_local

FEATURE_VERSION = 1
FEATURE_SIZE = 12


@dataclass(frozen=True, eq=False)
class PlanRequest:
    position: np.ndarray      # (2,)
    velocity: np.ndarray      # (2,)
    acceleration: np.ndarray  # (2,)
    heading: float
    goal: np.ndarray          # (2,)
    horizon_steps: int
    dt: float
    limits: KinematicLimits
    terminal_speed: float | None = None      # defaults to min(speed, lane default)
    terminal_direction: np.ndarray | None = None  # unit vector; defaults along goal

    def __post_init__(self):
        if self.horizon_steps < 1:
            raise ValueError("horizon_steps must be >= 1")
        for name in ("position", "velocity", "acceleration", "goal"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(2)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.terminal_direction is not None:
            d = np.asarray(self.terminal_direction, dtype=float).reshape(2)
            norm = float(np.hypot(d[0], d[1]))
            if norm <= 0:
                raise ValueError("terminal_direction must be non-zero")
            d = d / norm
            d.setflags(write=False)
            object.__setattr__(self, "terminal_direction", d)


DEFAULT_TERMINAL_SPEED = 10.0


class QuinticPolynomial:
    """Degree-5 polynomial matching position/velocity/acceleration at both ends."""

    def __init__(self, x0, v0, a0, x1, v1, a1, duration):
        t = duration
        self.c0 = x0
        self.c1 = v0
        self.c2 = a0 / 2.0
        mat = np.array([
            [t**3, t**4, t**5],
            [3 * t**2, 4 * t**3, 5 * t**4],
            [6 * t, 12 * t**2, 20 * t**3],
        ])
        rhs = np.array([
            x1 - self.c0 - self.c1 * t - self.c2 * t * t,
            v1 - self.c1 - 2.0 * self.c2 * t,
            a1 - 2.0 * self.c2,
        ])
        self.c3, self.c4, self.c5 = np.linalg.solve(mat, rhs)

    def position(self, t):
        return self.c0 + self.c1 * t + self.c2 * t**2 + self.c3 * t**3 + self.c4 * t**4 + self.c5 * t**5

    def velocity(self, t):
        return self.c1 + 2 * self.c2 * t + 3 * self.c3 * t**2 + 4 * self.c4 * t**3 + 5 * self.c5 * t**4

    def acceleration(self, t):
        return 2 * self.c2 + 6 * self.c3 * t + 12 * self.c4 * t**2 + 20 * self.c5 * t**3

    def jerk(self, t):
        return 6 * self.c3 + 24 * self.c4 * t + 60 * self.c5 * t**2


def plan_quintic(req: PlanRequest) -> ControlProfile:
    """Minimum-jerk completion from the current state to the goal.

    Terminal velocity points along ``terminal_direction`` (by default toward
    the goal) at ``terminal_speed``; terminal acceleration is zero. Boundary
    conditions are met exactly by the underlying polynomial; the returned
    profile samples it at dt. Limit violations are reported by
    ``kinematics.check_limits``, never clipped here.
    """
    duration = req.horizon_steps * req.dt
    speed = float(np.linalg.norm(req.velocity))
    term_speed = req.terminal_speed
    if term_speed is None:
        term_speed = min(speed, DEFAULT_TERMINAL_SPEED)
    direction = req.terminal_direction
    if direction is None:
        d = req.goal - req.position
        norm = float(np.hypot(d[0], d[1]))
        if norm < 1e-9:
            direction = np.zeros(2)
            term_speed = 0.0
        else:
            direction = d / norm
    v_end = direction * term_speed

    polys = [
        QuinticPolynomial(req.position[ax], req.velocity[ax], req.acceleration[ax],
                          req.goal[ax], v_end[ax], 0.0, duration)
        for ax in range(2)
    ]
    n = req.horizon_steps
    times = np.arange(n + 1) * req.dt
    p = np.column_stack([polys[0].position(times), polys[1].position(times)])
    v = np.column_stack([polys[0].velocity(times), polys[1].velocity(times)])
    a = np.column_stack([polys[0].acceleration(times), polys[1].acceleration(times)])
    j = np.column_stack([polys[0].jerk(times[:-1]), polys[1].jerk(times[:-1])])
    return ControlProfile(dt=req.dt, p=p, v=v, a=a, j=j)


# ---------------------------------------------------------------------------
# Learned goal-conditioned planner
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LearnedPlannerWeights:
    """MLP weights plus the frozen feature/normalization contract."""

    weights: tuple[np.ndarray, ...]   # row-major (rows, cols) per layer
    biases: tuple[np.ndarray, ...]
    activation: str
    input_offset: np.ndarray
    input_scale: np.ndarray
    output_offset: np.ndarray
    output_scale: np.ndarray

    def __post_init__(self):
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")
        dims = [w.shape for w in self.weights]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape[0] != w.shape[0]:
                raise ValueError(f"layer {i}: bias size {b.shape[0]} != rows {w.shape[0]}")
            if i > 0 and w.shape[1] != dims[i - 1][0]:
                raise ValueError(
                    f"layer {i}: expects {w.shape[1]} inputs, previous layer emits {dims[i - 1][0]}")
        if self.weights[0].shape[1] != FEATURE_SIZE:
            raise ValueError(f"layer 0: expects {self.weights[0].shape[1]} inputs, feature layout has {FEATURE_SIZE}")
        if self.weights[-1].shape[0] % 2 != 0:
            raise ValueError("output layer must emit 2 values per step")

    @property
    def horizon_steps(self) -> int:
        return self.weights[-1].shape[0] // 2


def load_weights(data: bytes | str) -> LearnedPlannerWeights:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    doc = json.loads(data)
    if doc.get("feature_version") != FEATURE_VERSION:
        raise ValueError(f"unknown feature_version {doc.get('feature_version')!r}")
    weights = []
    biases = []
    for i, layer in enumerate(doc["layers"]):
        rows, cols = int(layer["rows"]), int(layer["cols"])
        w = np.asarray(layer["w"], dtype=float)
        if w.size != rows * cols:
            raise ValueError(f"layer {i}: weight count {w.size} != rows*cols {rows * cols}")
        weights.append(w.reshape(rows, cols))
        biases.append(np.asarray(layer["b"], dtype=float))
    return LearnedPlannerWeights(
        weights=tuple(weights),
        biases=tuple(biases),
        activation=doc["activation"],
        input_offset=np.asarray(doc["input_norm"]["offset"], dtype=float),
        input_scale=np.asarray(doc["input_norm"]["scale"], dtype=float),
        output_offset=np.asarray(doc["output_norm"]["offset"], dtype=float),
        output_scale=np.asarray(doc["output_norm"]["scale"], dtype=float),
    )


def save_weights(weights: LearnedPlannerWeights) -> bytes:
    doc = {
        "layers": [
            {"rows": w.shape[0], "cols": w.shape[1], "w": w.ravel().tolist(), "b": b.tolist()}
            for w, b in zip(weights.weights, weights.biases)
        ],
        "activation": weights.activation,
        "input_norm": {"offset": weights.input_offset.tolist(), "scale": weights.input_scale.tolist()},
        "output_norm": {"offset": weights.output_offset.tolist(), "scale": weights.output_scale.tolist()},
        "feature_version": FEATURE_VERSION,
    }
    return json.dumps(doc).encode("utf-8")


def plan_features(req: PlanRequest) -> np.ndarray:
    """The frozen 12-feature layout, all quantities in the current-pose frame."""
    c, s = math.cos(req.heading), math.sin(req.heading)
    rot = np.array([[c, s], [-s, c]])
    v_local = rot @ req.velocity
    a_local = rot @ req.acceleration
    goal_local = rot @ (req.goal - req.position)
    term_speed = req.terminal_speed
    if term_speed is None:
        term_speed = min(float(np.linalg.norm(req.velocity)), DEFAULT_TERMINAL_SPEED)
    return np.array([
        0.0, 0.0,                       # position in its own frame
        v_local[0], v_local[1],
        a_local[0], a_local[1],
        0.0, 1.0,                       # heading sin/cos in its own frame
        goal_local[0], goal_local[1],
        req.horizon_steps * req.dt,
        term_speed,
    ])


def mlp_forward(weights: LearnedPlannerWeights, features: np.ndarray) -> np.ndarray:
    x = (features - weights.input_offset) / weights.input_scale
    last = len(weights.weights) - 1
    for i, (w, b) in enumerate(zip(weights.weights, weights.biases)):
        x = w @ x + b
        if i < last:
            x = np.tanh(x)
    return x * weights.output_scale + weights.output_offset


def plan_learned(req: PlanRequest, weights: LearnedPlannerWeights) -> ControlProfile:
    """Forward pass producing local-frame position offsets, mapped back to global.

    The network emits its native number of steps; other horizons are sampled
    along the same fractional timeline (endpoints preserved). An all-zero
    output degenerates to a stationary profile by construction.
    """
    raw = mlp_forward(weights, plan_features(req))
    native = weights.horizon_steps
    offsets = raw.reshape(native, 2)
    n = req.horizon_steps
    if n != native:
        frac_native = np.arange(1, native + 1) / native
        frac_req = np.arange(1, n + 1) / n
        offsets = np.column_stack([
            np.interp(frac_req, frac_native, offsets[:, 0]),
            np.interp(frac_req, frac_native, offsets[:, 1]),
        ])
    frame = AgentState(req.position[0], req.position[1], req.heading)
    points = points_from_local(offsets, frame)
    p = np.vstack([req.position, points])
    v = np.vstack([req.velocity, np.diff(p, axis=0) / req.dt])
    a = np.vstack([req.acceleration, np.diff(v, axis=0) / req.dt])
    j = np.diff(a, axis=0) / req.dt
    return ControlProfile(dt=req.dt, p=p, v=v, a=a, j=j)


# ---------------------------------------------------------------------------
# Reactive policies: IDM car following + lookahead-point lane keeping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IdmParams:
    desired_speed: float = 10.0
    time_headway: float = 1.5
    min_gap: float = 2.0
    accel_max: float = 2.0
    decel_comfort: float = 3.0
    exponent: float = 4.0


@dataclass(frozen=True, eq=False)
class PolicyCommand:
    acceleration: np.ndarray  # (2,) command handed to the integrator
    steer_target: np.ndarray  # (2,) lookahead point being tracked
    longitudinal: float       # signed car-following acceleration


def idm_acceleration(speed: float, gap: float, closing_speed: float, params: IdmParams) -> float:
    """Intelligent-driver-model longitudinal command for a gap to the leader."""
    v = max(speed, 0.0)
    s_star = params.min_gap + max(
        0.0, v * params.time_headway + v * closing_speed / (2.0 * math.sqrt(params.accel_max * params.decel_comfort)))
    gap = max(gap, 0.1)
    accel = params.accel_max * (1.0 - (v / params.desired_speed) ** params.exponent - (s_star / gap) ** 2)
    return accel


def _leader_along_lane(
    position: np.ndarray, speed: float, lane_points: np.ndarray,
    neighbors: list[tuple[AgentState, float, float, np.ndarray]],
    lateral_window: float,
) -> tuple[float, float] | None:
    """Nearest agent ahead in the lane band: (bumper gap, closing speed)."""
    s_own = kinematics.arc_progress(position, lane_points)
    best = None
    for state, length, width, velocity in neighbors:
        pos = np.array([state.x, state.y])
        lat = kinematics.polyline_distance(lane_points, pos)
        if lat > lateral_window:
            continue
        s_other = kinematics.arc_progress(pos, lane_points)
        ahead = s_other - s_own
        if ahead <= 0.0:
            continue
        gap = ahead - length / 2.0 - 2.25  # bumper-to-bumper, own half-length
        closing = speed - float(np.linalg.norm(velocity))
        if best is None or ahead < best[2]:
            best = (gap, closing, ahead)
    if best is None:
        return None
    return best[0], best[1]


def _pursuit_command(
    position: np.ndarray, velocity: np.ndarray, heading: float,
    lane_points: np.ndarray, a_long: float, limits: KinematicLimits,
    lookahead_base: float = 4.0,
) -> PolicyCommand:
    speed = float(np.linalg.norm(velocity))
    s = kinematics.arc_progress(position, lane_points)
    lookahead = lookahead_base + 0.8 * speed
    target, tangent = kinematics.point_at_arclength(lane_points, s + lookahead)

    hdir = np.array([math.cos(heading), math.sin(heading)])
    to_target = target - position
    dist = float(np.linalg.norm(to_target))
    if dist > 1e-6 and speed > 0.3:
        # pure-pursuit curvature from the heading-relative bearing of the target
        alpha = math.atan2(to_target[1], to_target[0]) - heading
        alpha = math.atan2(math.sin(alpha), math.cos(alpha))
        curvature = 2.0 * math.sin(alpha) / dist
        a_lat = curvature * speed * speed
    else:
        a_lat = 0.0
    perp = np.array([-hdir[1], hdir[0]])
    accel = a_long * hdir + a_lat * perp
    norm = float(np.linalg.norm(accel))
    if norm > limits.a_max:
        accel = accel * (limits.a_max / norm)
    return PolicyCommand(acceleration=accel, steer_target=target, longitudinal=a_long)


def bv_policy_step(
    position: np.ndarray,
    velocity: np.ndarray,
    heading: float,
    lane_points: np.ndarray,
    neighbors: list[tuple[AgentState, float, float, np.ndarray]],
    limits: KinematicLimits,
    params: IdmParams | None = None,
) -> PolicyCommand:
    """Reactive background-vehicle command: IDM along the lane, pursuit across it.

    ``neighbors`` carries (state, length, width, velocity) of every other agent.
    The command magnitude never exceeds the acceleration limit.
    """
    params = params or IdmParams()
    speed = float(np.linalg.norm(velocity))
    leader = _leader_along_lane(position, speed, lane_points, neighbors, lateral_window=1.9)
    if leader is None:
        a_long = params.accel_max * (1.0 - (max(speed, 0.0) / params.desired_speed) ** params.exponent)
    else:
        a_long = idm_acceleration(speed, leader[0], leader[1], params)
    a_long = max(min(a_long, params.accel_max), -limits.a_max)
    return _pursuit_command(position, velocity, heading, lane_points, a_long, limits)


def av_rule_planner_step(
    position: np.ndarray,
    velocity: np.ndarray,
    heading: float,
    route_points: np.ndarray,
    neighbors: list[tuple[AgentState, float, float, np.ndarray]],
    limits: KinematicLimits,
    params: IdmParams | None = None,
) -> PolicyCommand:
    """Rule-based AV planner: the BV policy tracking a designated route."""
    return bv_policy_step(position, velocity, heading, route_points, neighbors, limits, params)
