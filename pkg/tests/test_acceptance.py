"""Acceptance suite: every criterion prints one PASS/FAIL line.

The fixed suite is 400 synthetic scenarios (100 seeds per template, committed
manifest). Dataset-scale numbers are not reproducible at this scale; the
criteria are property-based plus directional orderings on the suite.
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from adversim import metrics as metrics_mod
from adversim import solver
from adversim.kinematics import (
    DrivableArea,
    KinematicLimits,
    check_limits,
    drivable_area,
    profile_from_positions,
)
from adversim.metrics import kinematic_samples, report, report_to_json
from adversim.planners import PlanRequest, load_weights, mlp_forward, plan_learned
from adversim.priors import EmpiricalSamples, fit_prior, wasserstein1
from adversim.scenario import synth_scenario
from adversim.simulate import (
    INTENTION_HEURISTIC,
    INTENTION_NONE,
    OV_PLANNER_SEED,
    RolloutLog,
    SimConfig,
    batch_run,
    save_log,
)

from tests import oracles

SUITE_SEED = 0
LIMITS = KinematicLimits()
JOBS = min(4, os.cpu_count() or 1)
ROOT = Path(__file__).resolve().parent.parent


def criterion(name: str, ok: bool, detail: str):
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="session")
def suite():
    manifest = json.loads((ROOT / "tests" / "data" / "suite_manifest.json").read_text())
    scenarios = [synth_scenario(e["seed"], e["template"]) for e in manifest["entries"]]
    names = [f'{e["template"]}_{e["seed"]:04d}' for e in manifest["entries"]]
    return names, scenarios


@pytest.fixture(scope="session")
def suite_prior_full(suite):
    _, scenarios = suite
    profiles = []
    for sc in scenarios:
        profiles += [profile_from_positions(a.trajectory.positions, sc.dt) for a in sc.agents]
    return fit_prior(profiles)


@pytest.fixture(scope="session")
def reference_samples(suite):
    _, scenarios = suite
    accels, jerks = [], []
    for sc in scenarios:
        a, j = kinematic_samples(sc.ov.trajectory.positions[sc.history_steps:], sc.dt)
        accels.append(a)
        jerks.append(j)
    return (EmpiricalSamples(np.concatenate(accels)), EmpiricalSamples(np.concatenate(jerks)))


def run_variant(scenarios, config, prior):
    t0 = time.perf_counter()
    results = batch_run(scenarios, config, prior, jobs=JOBS)
    wall = time.perf_counter() - t0
    logs = [r for r in results if isinstance(r, RolloutLog)]
    assert len(logs) == len(scenarios), "per-scenario failures in the suite run"
    return logs, wall


def suite_report(scenarios, logs, reference):
    maps = [sc.map for sc in scenarios]
    routes = []
    for sc, log in zip(scenarios, logs):
        pts = np.vstack([sc.map.lanes[i].points[:, :2] for i in log.route])
        routes.append(metrics_mod.trim_route(pts, log.states[log.av_id][0, :2]))
    return report(logs, maps, reference, routes)


@pytest.fixture(scope="session")
def ablation_runs(suite, suite_prior_full, reference_samples):
    """All four variants over the suite; the full variant records details."""
    _, scenarios = suite
    runs = {}
    walls = {}
    configs = {
        "none": SimConfig(seed=SUITE_SEED, intention_mode=INTENTION_NONE),
        "opt": SimConfig(seed=SUITE_SEED, ov_planner=OV_PLANNER_SEED, raw_intention=True),
        "interp": SimConfig(seed=SUITE_SEED, intention_mode=INTENTION_HEURISTIC),
        "full": SimConfig(seed=SUITE_SEED, record_details=True),
    }
    for name, config in configs.items():
        logs, wall = run_variant(scenarios, config, suite_prior_full)
        runs[name] = logs
        walls[name] = wall
    reports = {name: suite_report(scenarios, logs, reference_samples)
               for name, logs in runs.items()}
    return runs, reports, walls


class TestPrimaryCriteria:
    def test_constraint_soundness_and_runtime(self, suite, ablation_runs):
        names, scenarios = suite
        runs, _, walls = ablation_runs
        n_int = 0
        worst = {"identity": 0.0, "limits": 0.0, "margin": -math.inf, "terminal": 0.0}
        clean = True
        for sc, log in zip(scenarios, runs["full"]):
            area = drivable_area(sc.map)
            for rec in log.intentions:
                if rec.seed_profile is None:
                    continue
                n_int += 1
                prof = rec.seed_profile
                dt = sc.dt
                ident = np.abs(prof.p[1:] - (prof.p[:-1] + prof.v[:-1] * dt
                                             + 0.5 * prof.a[:-1] * dt * dt)).max()
                worst["identity"] = max(worst["identity"], float(ident))
                hard = [v.magnitude for v in check_limits(prof, LIMITS)]
                worst["limits"] = max(worst["limits"], max(hard, default=0.0))
                margin = float(area.margin_many(prof.p).min())
                worst["margin"] = max(worst["margin"], -margin)
                d = float(np.linalg.norm(prof.p[rec.relative_t_star]
                                         - rec.av_positions[rec.relative_t_star]))
                worst["terminal"] = max(worst["terminal"], d - LIMITS.d_thres)
                ok = (ident == 0.0 and max(hard, default=0.0) <= 1e-4
                      and margin >= -1e-3 and d <= LIMITS.d_thres + 1e-4)
                clean = clean and ok
        projected = walls["full"] / (4.0 / min(JOBS, 4))
        runtime_ok = projected < 600.0
        criterion(
            "constraint soundness + runtime",
            clean and n_int > 0 and runtime_ok,
            f"{n_int} intentions, worst: identity {worst['identity']:.1e}, "
            f"limit excess {worst['limits']:.2e}, margin deficit {worst['margin']:.2e}, "
            f"terminal excess {worst['terminal']:.2e}; wall {walls['full']:.0f}s at {JOBS} "
            f"job(s) -> {projected:.0f}s projected on 4 cores (< 600)")

    def test_adversariality_on_certified_subset(self, suite, suite_prior_full, ablation_runs):
        names, scenarios = suite
        runs, reports, _ = ablation_runs
        full_logs = runs["full"]
        collided = [log.termination == "collision" for log in full_logs]
        certified = list(collided)  # an actual collision certifies feasibility
        for i, (sc, hit) in enumerate(zip(scenarios, collided)):
            if hit:
                continue
            area = DrivableArea(sc.map)
            found = oracles.goal_grid_attack_search(sc, LIMITS, area, prior=None, grid_step=1.0)
            certified[i] = found is not None
        n_cert = sum(certified)
        n_hit = sum(h for h, c in zip(collided, certified) if c)
        rate = 100.0 * n_hit / max(n_cert, 1)
        share = reports["full"].inroad_collision_share or 0.0
        criterion(
            "adversariality",
            rate >= 80.0 and share >= 90.0 and n_cert > 0,
            f"collision {rate:.1f}% on {n_cert} certified scenarios (>= 80), "
            f"in-road share {share:.1f}% (>= 90)")

    def test_ablation_orderings(self, ablation_runs):
        _, reports, _ = ablation_runs
        r = reports
        checks = [
            ("collision(none) < collision(full)",
             r["none"].collision_rate < r["full"].collision_rate,
             f'{r["none"].collision_rate:.1f} < {r["full"].collision_rate:.1f}'),
            ("offroad(interp) > offroad(full)",
             r["interp"].offroad_rate > r["full"].offroad_rate,
             f'{r["interp"].offroad_rate:.1f} > {r["full"].offroad_rate:.1f}'),
            ("jerk-W1(interp) > jerk-W1(full)",
             r["interp"].jerk_w1 > r["full"].jerk_w1,
             f'{r["interp"].jerk_w1:.2f} > {r["full"].jerk_w1:.2f}'),
            ("global-offroad(opt) > global-offroad(full)",
             r["opt"].global_offroad_rate > r["full"].global_offroad_rate,
             f'{r["opt"].global_offroad_rate:.1f} > {r["full"].global_offroad_rate:.1f}'),
        ]
        ok = all(c[1] for c in checks)
        criterion("ablation orderings", ok,
                  "; ".join(f"{name}: {detail} [{'ok' if good else 'VIOLATED'}]"
                            for name, good, detail in checks))

    def test_realism_gap(self, ablation_runs):
        _, reports, _ = ablation_runs
        gap = reports["full"].global_offroad_rate - reports["full"].offroad_rate
        criterion("realism gap", gap <= 3.0,
                  f"global {reports['full'].global_offroad_rate:.1f} - truncated "
                  f"{reports['full'].offroad_rate:.1f} = {gap:.1f} pp (<= 3)")

    def test_solver_objective_vs_grid_oracle(self):
        rng = np.random.default_rng(424242)
        from tests.test_solver import random_tiny_problem

        checked = 0
        worst_gap = -math.inf
        ok = True
        while checked < 50:
            problem = random_tiny_problem(rng)
            sol = solver.solve(problem)
            if sol.status != solver.STATUS_OPTIMAL:
                continue
            oracle_val, oracle_x = oracles.grid_search_inner(problem)
            if oracle_x is None:
                continue
            checked += 1
            tol = 1e-4 + 0.05 * abs(oracle_val)
            gap = sol.objective_value - oracle_val
            worst_gap = max(worst_gap, gap - tol)
            ok = ok and (gap <= tol) and (sol.primal_residual <= 1e-5)
        criterion("solver correctness vs grid oracle", ok,
                  f"{checked} tiny instances (T<=5), worst objective excess over "
                  f"tolerance {worst_gap:.2e} (<= 0), all post-checks <= 1e-5")

    def test_efficiency(self, ablation_runs):
        _, reports, _ = ablation_runs
        mean_time = reports["full"].mean_generation_time
        criterion("efficiency", mean_time is not None and mean_time < 2.0,
                  f"mean generation time per replanning step {mean_time:.3f}s (< 2.0, default config)")

    def test_metric_unit_criteria(self, rng):
        # W1 axioms
        axioms_ok = True
        for _ in range(40):
            a = EmpiricalSamples(rng.uniform(0, 4, int(rng.integers(2, 20))))
            b = EmpiricalSamples(rng.uniform(0, 4, int(rng.integers(2, 20))))
            c = EmpiricalSamples(rng.uniform(0, 4, int(rng.integers(2, 20))))
            dab = wasserstein1(a, b)
            axioms_ok &= dab >= 0
            axioms_ok &= abs(dab - wasserstein1(b, a)) <= 1e-9
            axioms_ok &= dab <= wasserstein1(a, c) + wasserstein1(c, b) + 1e-9
        values = rng.uniform(0, 5, 64)
        axioms_ok &= wasserstein1(EmpiricalSamples(values), EmpiricalSamples(values.copy())) == 0.0

        # raw playback distances are exactly zero
        sc = synth_scenario(3, "oncoming")
        h = sc.history_steps
        path = sc.ov.trajectory.positions[h:]
        ref_a, ref_j = kinematic_samples(path, sc.dt)
        gen = metrics_mod.kinematic_distances(
            [_playback_log(sc)], (EmpiricalSamples(ref_a), EmpiricalSamples(ref_j)))
        playback_ok = gen == (0.0, 0.0)

        # global >= truncated on arbitrary inputs
        from tests.test_metrics import straight_map, synthetic_log

        mono_ok = True
        m = straight_map()
        for _ in range(60):
            n = int(rng.integers(5, 25))
            path2 = np.column_stack([np.cumsum(rng.uniform(0, 2, n)), rng.uniform(-5, 5, n)])
            plan = rng.uniform([-5, -7], [40, 7], (int(rng.integers(1, 8)), 2))
            hit = bool(rng.random() < 0.5)
            log = synthetic_log(path2, "collision" if hit else "horizon-end",
                                n - 1 if hit else None, final_plan=plan)
            truncated, global_off = metrics_mod.offroad_rates([log], m)
            mono_ok &= global_off >= truncated
        criterion("metric unit criteria", bool(axioms_ok and playback_ok and mono_ok),
                  f"W1 axioms {bool(axioms_ok)}, playback distances {gen} == (0, 0), "
                  f"global >= truncated {mono_ok}")

    def test_determinism_byte_identical(self, suite, suite_prior_full, reference_samples,
                                        ablation_runs):
        names, scenarios = suite
        runs, reports, _ = ablation_runs
        logs_again, _ = run_variant(scenarios, SimConfig(seed=SUITE_SEED), suite_prior_full)
        rep_a = report_to_json(reports["full"], include_timing=False)
        rep_b = report_to_json(suite_report(scenarios, logs_again, reference_samples),
                               include_timing=False)
        logs_ok = True
        for a, b in zip(runs["full"], logs_again):
            da = [json.loads(x) for x in save_log(a).decode().splitlines()]
            db = [json.loads(x) for x in save_log(b).decode().splitlines()]
            da[-1].pop("tick_wall_times")
            db[-1].pop("tick_wall_times")
            logs_ok &= da == db
        criterion("determinism", rep_a == rep_b and logs_ok,
                  f"repeated full-suite reports byte-identical: {rep_a == rep_b}; "
                  f"step records identical: {logs_ok}")


def _playback_log(sc):
    from tests.test_metrics import synthetic_log

    h = sc.history_steps
    return synthetic_log(sc.ov.trajectory.positions[h:],
                         av_path=sc.av.trajectory.positions[h:])


class TestSecondaryCriteria:
    ARTIFACTS = ROOT / "trainer" / "artifacts"

    @pytest.fixture(scope="class")
    def trained(self):
        weights_file = self.ARTIFACTS / "weights.json"
        if not weights_file.exists():
            pytest.fail("trainer artifacts missing; run the trainer CLI first (see README)")
        return load_weights(weights_file.read_bytes())

    def test_cross_language_forward_agreement(self, trained):
        fixtures = json.loads((self.ARTIFACTS / "forward_fixtures.json").read_text())
        worst = 0.0
        for case in fixtures["cases"]:
            out = mlp_forward(trained, np.array(case["input"]))
            worst = max(worst, float(np.abs(out - np.array(case["output"])).max()))
        criterion("secondary: cross-language forward pass", worst < 1e-5,
                  f"max abs difference {worst:.2e} over {len(fixtures['cases'])} cases (< 1e-5)")

    def test_trained_planner_errors(self, trained):
        # held-out requests: windows from scenarios unseen in training
        # (training used seeds 500+; these use 900+)
        requests = []
        for seed in range(900, 912):
            sc = synth_scenario(seed % 4 * 250 + seed, "adjacent-lane")
            for agent in sc.agents:
                states = agent.trajectory.states
                for t0 in (2, 6, 10):
                    horizon = trained.horizon_steps
                    if t0 + horizon >= states.shape[0]:
                        continue
                    dt = sc.dt
                    p = states[t0]
                    v = (states[t0][:2] - states[t0 - 1][:2]) / dt
                    a = (states[t0][:2] - 2 * states[t0 - 1][:2] + states[t0 - 2][:2]) / dt**2
                    end = states[t0 + horizon][:2]
                    end_prev = states[t0 + horizon - 1][:2]
                    requests.append((PlanRequest(
                        position=p[:2], velocity=v, acceleration=a, heading=p[2],
                        goal=end, horizon_steps=horizon, dt=dt, limits=LIMITS,
                        terminal_speed=float(np.linalg.norm((end - end_prev) / dt)),
                    ), states[t0 + 1: t0 + horizon + 1, :2]))
        assert len(requests) >= 50
        fde = ade = fallback_ade = 0.0
        for req, truth in requests:
            profile = plan_learned(req, trained)
            errors = np.linalg.norm(profile.p[1:] - truth, axis=1)
            ade += float(errors.mean())
            fde += float(errors[-1])
            fallback_ade += float(np.linalg.norm(truth - req.position, axis=1).mean())
        n = len(requests)
        ade /= n
        fde /= n
        fallback_ade /= n
        criterion("secondary: trained planner quality",
                  fde <= 0.1 and ade < fallback_ade,
                  f"FDE {fde:.3f} m (<= 0.1), ADE {ade:.3f} m < stationary-fallback "
                  f"ADE {fallback_ade:.1f} m over {n} held-out requests")
