"""Metric suite over rollout logs: adversariality, realism, and efficiency.

Rates are per-scenario percentages. Offroad is judged at the opponent's
center point; the truncated variant stops at the collision step while the
global variant additionally scans the opponent's full final plan beyond any
collision truncation (so global >= truncated by construction). Kinematic
realism is the Wasserstein-1 distance between magnitude samples of the
generated and reference opponent accelerations and jerks, both derived from
positions by finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from adversim import kinematics
from adversim.priors import EmpiricalSamples, wasserstein1
from adversim.scenario import MapModel
from adversim.simulate import TERMINATION_COLLISION, RolloutLog


@dataclass(frozen=True)
class MetricsReport:
    collision_rate: float
    offroad_rate: float
    global_offroad_rate: float
    inroad_and_collision: float
    inroad_collision_share: float | None  # share of collisions that stayed in-road
    accel_w1: float
    jerk_w1: float
    mean_generation_time: float | None
    route_completion: float
    n_scenarios: int

    def __post_init__(self):
        for name in ("collision_rate", "offroad_rate", "global_offroad_rate", "inroad_and_collision"):
            value = getattr(self, name)
            if not (0.0 <= value <= 100.0):
                raise ValueError(f"{name} out of range: {value}")
        if self.inroad_and_collision > self.collision_rate + 1e-9:
            raise ValueError("in-road-and-collision cannot exceed the collision rate")

    def to_dict(self, include_timing: bool = True) -> dict:
        doc = {
            "collision_rate": self.collision_rate,
            "offroad_rate": self.offroad_rate,
            "global_offroad_rate": self.global_offroad_rate,
            "inroad_and_collision": self.inroad_and_collision,
            "inroad_collision_share": self.inroad_collision_share,
            "accel_w1": self.accel_w1,
            "jerk_w1": self.jerk_w1,
            "route_completion": self.route_completion,
            "n_scenarios": self.n_scenarios,
        }
        if include_timing:
            doc["mean_generation_time"] = self.mean_generation_time
        return doc


def _as_map_list(map_model, n: int) -> list[MapModel]:
    if isinstance(map_model, MapModel):
        return [map_model] * n
    maps = list(map_model)
    if len(maps) != n:
        raise ValueError(f"expected {n} maps, got {len(maps)}")
    return maps


def collision_rate(logs: list[RolloutLog]) -> float:
    """Percentage of logs terminated by an AV collision."""
    if not logs:
        raise ValueError("collision_rate requires at least one log")
    hits = sum(1 for log in logs if log.termination == TERMINATION_COLLISION)
    return 100.0 * hits / len(logs)


def _ov_positions_truncated(log: RolloutLog) -> np.ndarray | None:
    if log.ov_id is None:
        return None
    states = log.states[log.ov_id]
    end = log.collision_step + 1 if log.collision_step is not None else states.shape[0]
    return states[:end, :2]


def _log_offroad_flags(log: RolloutLog, area: kinematics.DrivableArea) -> tuple[bool, bool]:
    positions = _ov_positions_truncated(log)
    if positions is None:
        return False, False
    truncated = bool(np.any(area.margin_many(positions) < 0.0))
    global_off = truncated
    if not global_off and log.final_ov_plan is not None and len(log.final_ov_plan):
        global_off = bool(np.any(area.margin_many(np.asarray(log.final_ov_plan)) < 0.0))
    return truncated, global_off


def offroad_rates(logs: list[RolloutLog], map_model) -> tuple[float, float]:
    """(truncated, global) opponent offroad percentages; global >= truncated."""
    if not logs:
        raise ValueError("offroad_rates requires at least one log")
    maps = _as_map_list(map_model, len(logs))
    n_trunc = n_global = 0
    for log, m in zip(logs, maps):
        truncated, global_off = _log_offroad_flags(log, kinematics.drivable_area(m))
        n_trunc += truncated
        n_global += global_off
    return 100.0 * n_trunc / len(logs), 100.0 * n_global / len(logs)


def kinematic_samples(positions: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Acceleration and jerk magnitude samples from a position sequence."""
    positions = np.asarray(positions, dtype=float)
    if positions.shape[0] < 4:
        return np.zeros(0), np.zeros(0)
    v = np.diff(positions, axis=0) / dt
    a = np.diff(v, axis=0) / dt
    j = np.diff(a, axis=0) / dt
    return np.linalg.norm(a, axis=1), np.linalg.norm(j, axis=1)


def pooled_ov_samples(logs: list[RolloutLog]) -> tuple[EmpiricalSamples, EmpiricalSamples]:
    """Pooled opponent acceleration/jerk magnitudes across logs (untruncated)."""
    accels, jerks = [], []
    for log in logs:
        if log.ov_id is None:
            continue
        a, j = kinematic_samples(log.states[log.ov_id][:, :2], log.dt)
        accels.append(a)
        jerks.append(j)
    if not accels:
        raise ValueError("no opponent samples in the logs")
    return EmpiricalSamples(np.concatenate(accels)), EmpiricalSamples(np.concatenate(jerks))


def kinematic_distances(
    logs: list[RolloutLog],
    reference: tuple[EmpiricalSamples, EmpiricalSamples],
) -> tuple[float, float]:
    """W1 between generated and reference opponent kinematic magnitudes."""
    gen_a, gen_j = pooled_ov_samples(logs)
    ref_a, ref_j = reference
    return wasserstein1(gen_a, ref_a), wasserstein1(gen_j, ref_j)


def trim_route(route: np.ndarray, start_point: np.ndarray) -> np.ndarray:
    """Route polyline starting at the projection of ``start_point`` onto it."""
    route = np.asarray(route, dtype=float)[:, :2]
    s = kinematics.arc_progress(start_point, route)
    point, _ = kinematics.point_at_arclength(route, s)
    seg = np.diff(route, axis=0)
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))])
    keep = route[cum > s + 1e-9]
    if keep.shape[0] == 0:
        keep = route[-1:][:]
    return np.vstack([point, keep])


def route_completion(logs: list[RolloutLog], routes: list[np.ndarray]) -> float:
    """Mean percentage of route arclength covered by the AV's final position.

    Routes must start where the AV starts (see :func:`trim_route`).
    """
    if not logs:
        raise ValueError("route_completion requires at least one log")
    if len(routes) != len(logs):
        raise ValueError("one route polyline per log is required")
    total = 0.0
    for log, route in zip(logs, routes):
        if route is None:
            raise ValueError("missing route for a log")
        final = log.states[log.av_id][-1, :2]
        length = max(kinematics.polyline_length(route), 1e-9)
        progress = kinematics.arc_progress(final, route)
        total += float(np.clip(progress / length, 0.0, 1.0)) * 100.0
    return total / len(logs)


def report(
    logs: list[RolloutLog],
    map_model,
    reference: tuple[EmpiricalSamples, EmpiricalSamples],
    routes: list[np.ndarray],
) -> MetricsReport:
    coll = collision_rate(logs)
    maps = _as_map_list(map_model, len(logs))
    n_trunc = n_global = n_inroad_coll = 0
    for log, m in zip(logs, maps):
        truncated, global_off = _log_offroad_flags(log, kinematics.drivable_area(m))
        n_trunc += truncated
        n_global += global_off
        if log.termination == TERMINATION_COLLISION and not truncated:
            n_inroad_coll += 1
    n = len(logs)
    accel_w1, jerk_w1 = kinematic_distances(logs, reference)
    ticks = [w for log in logs for w in log.tick_wall_times]
    mean_time = float(np.mean(ticks)) if ticks else None
    inroad = 100.0 * n_inroad_coll / n
    share = (inroad / coll * 100.0) if coll > 0 else None
    return MetricsReport(
        collision_rate=coll,
        offroad_rate=100.0 * n_trunc / n,
        global_offroad_rate=100.0 * n_global / n,
        inroad_and_collision=inroad,
        inroad_collision_share=share,
        accel_w1=accel_w1,
        jerk_w1=jerk_w1,
        mean_generation_time=mean_time,
        route_completion=route_completion(logs, routes),
        n_scenarios=n,
    )


def format_table(rows: list[tuple[str, MetricsReport]]) -> str:
    """Aligned text table mirroring the reference column order."""
    header = ["Method", "Coll.", "Off Road", "Off Road (Global)",
              "In-Road & Coll.", "Accel. Dist.", "Jerk Dist.", "Time (s)", "Route Compl."]
    lines = [header]
    for name, rep in rows:
        if rep.inroad_collision_share is None:
            inroad = f"{rep.inroad_and_collision:.1f} (-)"
        else:
            inroad = f"{rep.inroad_and_collision:.1f} ({rep.inroad_collision_share:.1f}%)"
        time_cell = "-" if rep.mean_generation_time is None else f"{rep.mean_generation_time:.2f}"
        lines.append([
            name,
            f"{rep.collision_rate:.1f}",
            f"{rep.offroad_rate:.1f}",
            f"{rep.global_offroad_rate:.1f}",
            inroad,
            f"{rep.accel_w1:.2f}",
            f"{rep.jerk_w1:.2f}",
            time_cell,
            f"{rep.route_completion:.1f}",
        ])
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    out = []
    for i, row in enumerate(lines):
        out.append("  ".join(cell.ljust(widths[k]) for k, cell in enumerate(row)).rstrip())
        if i == 0:
            out.append("  ".join("-" * widths[k] for k in range(len(header))))
    return "\n".join(out) + "\n"


def report_to_json(rep: MetricsReport, include_timing: bool = True) -> bytes:
    return json.dumps(rep.to_dict(include_timing=include_timing), indent=2, sort_keys=True).encode("utf-8")
