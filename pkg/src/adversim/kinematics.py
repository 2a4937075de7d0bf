"""Kinematic propagation, feasibility bounds, drivable-area margin, collision geometry.

The motion model is a planar triple integrator: jerk integrates to acceleration,
velocity, and position through the discrete identities

    p[t] = p[t-1] + v[t-1]*dt + 0.5*a[t-1]*dt**2
    v[t] = v[t-1] + a[t-1]*dt
    a[t] = a[t-1] + j[t-1]*dt

and heading is read off the velocity vector (held at its previous value below
1e-3 m/s, where the angle is undefined).
"""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass

import numpy as np
import shapely
from shapely.geometry import LineString

from adversim.scenario import AgentState, MapModel, wrap_angle

SPEED_EPS = 1e-3  # below this the heading holds its previous value


@dataclass(frozen=True)
class KinematicLimits:
    """Feasibility bounds. ``dtheta_max`` is the per-step heading change budget."""

    v_max: float = 30.0
    a_max: float = 8.0
    dtheta_max: float = 0.3
    d_thres: float = 2.0

    def __post_init__(self):
        for name in ("v_max", "a_max", "dtheta_max", "d_thres"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass(frozen=True, eq=False)
class ControlProfile:
    """Aligned kinematic sequences: N+1 states (p, v, a) driven by N jerk controls."""

    dt: float
    p: np.ndarray  # (N+1, 2)
    v: np.ndarray  # (N+1, 2)
    a: np.ndarray  # (N+1, 2)
    j: np.ndarray  # (N, 2)

    def __post_init__(self):
        for name in ("p", "v", "a", "j"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n = self.j.shape[0]
        if not (self.p.shape == self.v.shape == self.a.shape == (n + 1, 2) and self.j.shape == (n, 2)):
            raise ValueError("misaligned profile arrays")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def steps(self) -> int:
        return self.j.shape[0]

    def headings(self, initial_heading: float | None = None) -> np.ndarray:
        return headings_from_velocities(self.v, initial_heading)


def propagate(initial: tuple[np.ndarray, np.ndarray, np.ndarray], jerks: np.ndarray, dt: float) -> ControlProfile:
    """Integrate a jerk sequence from (p0, v0, a0). The identities hold exactly."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    p0, v0, a0 = (np.asarray(x, dtype=float) for x in initial)
    jerks = np.asarray(jerks, dtype=float).reshape(-1, 2)
    if not (np.all(np.isfinite(p0)) and np.all(np.isfinite(v0)) and np.all(np.isfinite(a0)) and np.all(np.isfinite(jerks))):
        raise ValueError("non-finite input")
    n = jerks.shape[0]
    p = np.empty((n + 1, 2))
    v = np.empty((n + 1, 2))
    a = np.empty((n + 1, 2))
    p[0], v[0], a[0] = p0, v0, a0
    for t in range(n):
        p[t + 1] = p[t] + v[t] * dt + 0.5 * a[t] * dt * dt
        v[t + 1] = v[t] + a[t] * dt
        a[t + 1] = a[t] + jerks[t] * dt
    return ControlProfile(dt=dt, p=p, v=v, a=a, j=jerks)


def profile_from_positions(positions: np.ndarray, dt: float) -> ControlProfile:
    """Finite-difference profile for a logged position sequence (needs >= 4 points)."""
    positions = np.asarray(positions, dtype=float)
    if positions.shape[0] < 4:
        raise ValueError("need at least 4 positions to estimate jerk")
    v = np.diff(positions, axis=0) / dt
    a = np.diff(v, axis=0) / dt
    j = np.diff(a, axis=0) / dt
    n = j.shape[0]
    return ControlProfile(dt=dt, p=positions[: n + 1], v=v[: n + 1], a=a[: n + 1], j=j)


def heading_from_velocity(v: np.ndarray, prev_heading: float = 0.0) -> float:
    """Four-quadrant velocity angle; below SPEED_EPS the previous heading is kept."""
    vx, vy = float(v[0]), float(v[1])
    if math.hypot(vx, vy) < SPEED_EPS:
        return prev_heading
    return math.atan2(vy, vx)


def headings_from_velocities(v: np.ndarray, initial_heading: float | None = None) -> np.ndarray:
    """Apply the degenerate-speed hold rule along a velocity sequence."""
    v = np.asarray(v, dtype=float)
    out = np.empty(v.shape[0])
    prev = initial_heading
    if prev is None:
        prev = 0.0
        for row in v:
            if math.hypot(row[0], row[1]) >= SPEED_EPS:
                prev = math.atan2(row[1], row[0])
                break
    for i, row in enumerate(v):
        prev = heading_from_velocity(row, prev)
        out[i] = prev
    return out


@dataclass(frozen=True)
class LimitViolation:
    kind: str  # velocity | acceleration | heading_rate
    step: int
    magnitude: float  # amount by which the bound is exceeded


def check_limits(
    profile: ControlProfile, limits: KinematicLimits, initial_heading: float | None = None
) -> list[LimitViolation]:
    """Scan a profile against the velocity, acceleration, and heading-rate bounds."""
    violations: list[LimitViolation] = []
    speed = np.linalg.norm(profile.v, axis=1)
    for t in np.nonzero(speed > limits.v_max)[0]:
        violations.append(LimitViolation("velocity", int(t), float(speed[t] - limits.v_max)))
    accel = np.linalg.norm(profile.a, axis=1)
    for t in np.nonzero(accel > limits.a_max)[0]:
        violations.append(LimitViolation("acceleration", int(t), float(accel[t] - limits.a_max)))
    headings = profile.headings(initial_heading)
    for t in range(1, headings.shape[0]):
        step = abs(wrap_angle(headings[t] - headings[t - 1]))
        if step > limits.dtheta_max:
            violations.append(LimitViolation("heading_rate", t, float(step - limits.dtheta_max)))
    violations.sort(key=lambda v: (v.step, v.kind))
    return violations


# ---------------------------------------------------------------------------
# Drivable area: union of lane corridors (centerline swept by the lane width)
# ---------------------------------------------------------------------------


class DrivableArea:
    """Signed-distance queries against the union of lane corridors.

    Each lane contributes its centerline buffered by half the lane width with
    flat end caps, i.e. a rectangle swept along the polyline. The margin is
    positive inside the union, negative outside, zero on the boundary.
    """

    def __init__(self, map_model: MapModel):
        polys = [
            LineString(lane.points[:, :2]).buffer(lane.width / 2.0, cap_style="flat", join_style="round")
            for lane in map_model.lanes
        ]
        self.union = shapely.union_all(polys)
        self.boundary = self.union.boundary
        shapely.prepare(self.union)
        shapely.prepare(self.boundary)

    def margin(self, point: np.ndarray) -> float:
        pt = shapely.points(float(point[0]), float(point[1]))
        d = float(shapely.distance(pt, self.boundary))
        return d if self.union.covers(pt) else -d

    def margin_many(self, points: np.ndarray) -> np.ndarray:
        pts = shapely.points(np.asarray(points, dtype=float))
        d = shapely.distance(pts, self.boundary)
        inside = shapely.covers(self.union, pts)
        return np.where(inside, d, -d)


_AREA_CACHE: "weakref.WeakKeyDictionary[MapModel, DrivableArea]" = weakref.WeakKeyDictionary()


def drivable_area(map_model: MapModel) -> DrivableArea:
    area = _AREA_CACHE.get(map_model)
    if area is None:
        area = DrivableArea(map_model)
        _AREA_CACHE[map_model] = area
    return area


def d_margin(point: np.ndarray, map_model: MapModel) -> float:
    """Signed distance from a point to the drivable-area boundary (negative off-road)."""
    return drivable_area(map_model).margin(np.asarray(point, dtype=float))


# ---------------------------------------------------------------------------
# Collision geometry
# ---------------------------------------------------------------------------


def obb_corners(state: AgentState, length: float, width: float) -> np.ndarray:
    """Corners of the oriented footprint rectangle, counterclockwise."""
    c, s = math.cos(state.heading), math.sin(state.heading)
    hl, hw = length / 2.0, width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + [state.x, state.y]


def obb_overlap(
    state_a: AgentState, length_a: float, width_a: float,
    state_b: AgentState, length_b: float, width_b: float,
) -> bool:
    """Separating-axis test for two oriented rectangles; touching counts as overlap."""
    ca = obb_corners(state_a, length_a, width_a)
    cb = obb_corners(state_b, length_b, width_b)
    for heading in (state_a.heading, state_b.heading):
        c, s = math.cos(heading), math.sin(heading)
        for axis in ((c, s), (-s, c)):
            pa = ca @ axis
            pb = cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def center_distance_check(p_a: np.ndarray, p_b: np.ndarray, d_thres: float) -> bool:
    """True when the center distance is within the collision threshold."""
    d = np.asarray(p_a, dtype=float) - np.asarray(p_b, dtype=float)
    return float(np.hypot(d[0], d[1])) <= d_thres


# ---------------------------------------------------------------------------
# Polyline utilities
# ---------------------------------------------------------------------------


def _segments(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pts = np.asarray(points, dtype=float)[:, :2]
    starts = pts[:-1]
    vecs = pts[1:] - starts
    lens = np.hypot(vecs[:, 0], vecs[:, 1])
    return starts, vecs, lens


def polyline_length(points: np.ndarray) -> float:
    _, _, lens = _segments(points)
    return float(lens.sum())


def polyline_distance(points: np.ndarray, p: np.ndarray) -> float:
    starts, vecs, lens = _segments(points)
    rel = np.asarray(p, dtype=float) - starts
    t = np.clip(np.einsum("ij,ij->i", rel, vecs) / np.maximum(lens * lens, 1e-18), 0.0, 1.0)
    closest = starts + t[:, None] * vecs
    d = np.hypot(*(np.asarray(p, dtype=float) - closest).T)
    return float(np.min(d))


def arc_progress(p: np.ndarray, lane_points: np.ndarray) -> float:
    """Arclength of the closest-point projection of ``p`` onto the polyline, in [0, L]."""
    starts, vecs, lens = _segments(lane_points)
    rel = np.asarray(p, dtype=float) - starts
    t = np.clip(np.einsum("ij,ij->i", rel, vecs) / np.maximum(lens * lens, 1e-18), 0.0, 1.0)
    closest = starts + t[:, None] * vecs
    d = np.hypot(*(np.asarray(p, dtype=float) - closest).T)
    i = int(np.argmin(d))
    cum = np.concatenate([[0.0], np.cumsum(lens)])
    return float(cum[i] + t[i] * lens[i])


def point_at_arclength(lane_points: np.ndarray, s: float) -> tuple[np.ndarray, np.ndarray]:
    """Point and unit tangent at (clamped) arclength ``s`` along the polyline."""
    starts, vecs, lens = _segments(lane_points)
    cum = np.concatenate([[0.0], np.cumsum(lens)])
    s = float(np.clip(s, 0.0, cum[-1]))
    i = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(lens) - 1))
    frac = (s - cum[i]) / max(lens[i], 1e-18)
    point = starts[i] + frac * vecs[i]
    tangent = vecs[i] / max(lens[i], 1e-18)
    return point, tangent
