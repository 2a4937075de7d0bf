import numpy as np
import pytest

from adversim import metrics
from adversim.metrics import (
    MetricsReport,
    collision_rate,
    format_table,
    kinematic_distances,
    kinematic_samples,
    offroad_rates,
    pooled_ov_samples,
    report,
    route_completion,
    trim_route,
)
from adversim.priors import EmpiricalSamples, wasserstein1
from adversim.scenario import Lane, MapModel, synth_scenario
from adversim.simulate import RolloutLog


def straight_map(width=4.0):
    return MapModel(lanes=(Lane(points=np.array([[-10.0, 0.0, 0.0], [300.0, 0.0, 0.0]]),
                                width=width),))


def synthetic_log(ov_path, termination="horizon-end", collision_step=None, av_path=None,
                  final_plan=None, ticks=(0.1, 0.2)):
    ov_path = np.asarray(ov_path, dtype=float)
    n = ov_path.shape[0]
    av_path = np.asarray(av_path, dtype=float) if av_path is not None else ov_path + [30.0, 0.0]
    states = {
        "av": np.column_stack([av_path, np.zeros(n)]),
        "ov": np.column_stack([ov_path, np.zeros(n)]),
    }
    return RolloutLog(
        dt=0.1,
        times=np.arange(n) * 0.1,
        states=states,
        commands={},
        termination=termination,
        collision_step=collision_step,
        intentions=[],
        tick_wall_times=list(ticks),
        final_ov_plan=final_plan,
        route=[0],
        av_id="av",
        ov_id="ov",
        seed=0,
        fallback_ticks=[],
        footprints={"av": (4.5, 2.0), "ov": (4.5, 2.0)},
    )


def straight_path(n, speed=10.0, y=0.0, x0=0.0):
    return np.column_stack([x0 + np.arange(n) * 0.1 * speed, np.full(n, y)])


class TestCollisionRate:
    def test_all_collide(self):
        logs = [synthetic_log(straight_path(10), "collision", 9) for _ in range(4)]
        assert collision_rate(logs) == 100.0

    def test_none_collide(self):
        logs = [synthetic_log(straight_path(10)) for _ in range(4)]
        assert collision_rate(logs) == 0.0

    def test_fraction_by_hand(self):
        logs = [synthetic_log(straight_path(10), "collision", 9)] * 4 \
             + [synthetic_log(straight_path(10))] * 6
        assert collision_rate(logs) == pytest.approx(40.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            collision_rate([])


class TestOffroadRates:
    def test_centerline_clean(self):
        logs = [synthetic_log(straight_path(20))]
        assert offroad_rates(logs, straight_map()) == (0.0, 0.0)

    def test_offroad_only_after_collision_counts_global(self):
        # logged path in-road and truncated at the collision; the final plan
        # continues off the road
        plan = np.column_stack([np.linspace(1, 3, 10), np.linspace(0, 9, 10)])
        logs = [synthetic_log(straight_path(10), "collision", 9, final_plan=plan)]
        truncated, global_off = offroad_rates(logs, straight_map())
        assert truncated == 0.0
        assert global_off == 100.0

    def test_hand_classified_fixture(self):
        m = straight_map()
        logs = [
            synthetic_log(straight_path(10)),                                  # clean
            synthetic_log(straight_path(10, y=5.0)),                           # offroad all along
            synthetic_log(straight_path(10), "collision", 9,
                          final_plan=np.array([[1.0, 30.0]])),                 # off after collision
            synthetic_log(np.vstack([straight_path(5), straight_path(5, y=9)]),
                          "collision", 9),                                     # off before collision
        ]
        truncated, global_off = offroad_rates(logs, m)
        assert truncated == pytest.approx(50.0)
        assert global_off == pytest.approx(75.0)

    def test_global_never_below_truncated(self, rng):
        m = straight_map()
        for _ in range(30):
            n = int(rng.integers(5, 30))
            path = np.column_stack([np.cumsum(rng.uniform(0, 2, n)),
                                    rng.uniform(-4, 4, n)])
            plan = rng.uniform([-5, -6], [40, 6], (int(rng.integers(1, 10)), 2))
            collided = bool(rng.random() < 0.5)
            log = synthetic_log(path, "collision" if collided else "horizon-end",
                                n - 1 if collided else None, final_plan=plan)
            truncated, global_off = offroad_rates([log], m)
            assert global_off >= truncated

    def test_permutation_invariant(self):
        m = straight_map()
        logs = [synthetic_log(straight_path(10, y=float(y))) for y in (0, 5, 0, 1)]
        assert offroad_rates(logs, m) == offroad_rates(logs[::-1], m)


class TestKinematicDistances:
    def test_playback_exactly_zero(self):
        path = straight_path(30) + np.sin(np.arange(30))[:, None] * [0.02, 0.0]
        log = synthetic_log(path)
        reference = kinematic_samples(path, 0.1)
        dist = kinematic_distances([log], (EmpiricalSamples(reference[0]),
                                           EmpiricalSamples(reference[1])))
        assert dist == (0.0, 0.0)

    def test_unit_shift(self):
        log = synthetic_log(straight_path(30))
        gen_a, _ = pooled_ov_samples([log])
        ref = (EmpiricalSamples(gen_a.values + 1.0), EmpiricalSamples(np.zeros(5)))
        accel_w1, _ = kinematic_distances([log], ref)
        assert accel_w1 == pytest.approx(1.0)

    def test_delegates_to_wasserstein(self, rng):
        path = np.column_stack([np.cumsum(rng.uniform(0.5, 1.5, 40)), rng.normal(0, 0.1, 40)])
        log = synthetic_log(path)
        ref = (EmpiricalSamples(rng.uniform(0, 3, 25)), EmpiricalSamples(rng.uniform(0, 30, 25)))
        gen_a, gen_j = pooled_ov_samples([log])
        expected = (wasserstein1(gen_a, ref[0]), wasserstein1(gen_j, ref[1]))
        assert kinematic_distances([log], ref) == expected

    def test_symmetric(self, rng):
        a = EmpiricalSamples(rng.uniform(0, 2, 30))
        b = EmpiricalSamples(rng.uniform(0, 2, 40))
        assert wasserstein1(a, b) == pytest.approx(wasserstein1(b, a), abs=1e-12)


class TestRouteCompletion:
    route = np.array([[0.0, 0.0], [100.0, 0.0]])

    def make_log(self, x_final):
        path = np.vstack([straight_path(5, x0=0.0), [[x_final, 0.0]]])
        return synthetic_log(path, av_path=path)

    def test_full_route(self):
        assert route_completion([self.make_log(100.0)], [self.route]) == pytest.approx(100.0)

    def test_no_motion(self):
        log = synthetic_log(np.zeros((5, 2)), av_path=np.zeros((5, 2)))
        assert route_completion([log], [self.route]) == 0.0

    def test_halfway(self):
        assert route_completion([self.make_log(50.0)], [self.route]) == pytest.approx(50.0, abs=1.0)

    def test_missing_route_rejected(self):
        with pytest.raises(ValueError):
            route_completion([self.make_log(10.0)], [None])

    def test_trim_route_starts_at_projection(self):
        trimmed = trim_route(np.array([[0.0, 0.0], [100.0, 0.0]]), np.array([30.0, 1.0]))
        np.testing.assert_allclose(trimmed[0], [30.0, 0.0])
        assert metrics.kinematics.polyline_length(trimmed) == pytest.approx(70.0)


class TestReport:
    def fixture_logs(self):
        return [
            synthetic_log(straight_path(20), "collision", 19),
            synthetic_log(straight_path(20)),
            synthetic_log(straight_path(20, y=5.0), "collision", 19),
        ]

    def reference(self):
        a, j = kinematic_samples(straight_path(20), 0.1)
        return EmpiricalSamples(np.concatenate([a, [1.0]])), EmpiricalSamples(np.concatenate([j, [1.0]]))

    def test_fields_match_component_calls(self):
        logs = self.fixture_logs()
        m = straight_map()
        routes = [np.array([[0.0, 0.0], [100.0, 0.0]])] * 3
        rep = report(logs, m, self.reference(), routes)
        assert rep.collision_rate == collision_rate(logs)
        assert (rep.offroad_rate, rep.global_offroad_rate) == offroad_rates(logs, m)
        accel_w1, jerk_w1 = kinematic_distances(logs, self.reference())
        assert (rep.accel_w1, rep.jerk_w1) == (accel_w1, jerk_w1)
        assert rep.route_completion == route_completion(logs, routes)
        assert rep.n_scenarios == 3
        assert rep.mean_generation_time == pytest.approx(np.mean([0.1, 0.2]))

    def test_inroad_collision_bounded(self):
        logs = self.fixture_logs()
        rep = report(logs, straight_map(), self.reference(),
                     [np.array([[0.0, 0.0], [100.0, 0.0]])] * 3)
        assert rep.inroad_and_collision <= rep.collision_rate
        # one of the two collisions stayed in-road
        assert rep.inroad_and_collision == pytest.approx(100.0 / 3.0)
        assert rep.inroad_collision_share == pytest.approx(50.0)

    def test_table_share_formatting(self):
        logs = self.fixture_logs()
        rep = report(logs, straight_map(), self.reference(),
                     [np.array([[0.0, 0.0], [100.0, 0.0]])] * 3)
        table = format_table([("full", rep)])
        assert "33.3 (50.0%)" in table
        assert "Off Road (Global)" in table

    def test_invariant_validation(self):
        with pytest.raises(ValueError):
            MetricsReport(collision_rate=10.0, offroad_rate=0.0, global_offroad_rate=0.0,
                          inroad_and_collision=20.0, inroad_collision_share=None,
                          accel_w1=0.0, jerk_w1=0.0, mean_generation_time=None,
                          route_completion=0.0, n_scenarios=1)
        with pytest.raises(ValueError):
            MetricsReport(collision_rate=120.0, offroad_rate=0.0, global_offroad_rate=0.0,
                          inroad_and_collision=0.0, inroad_collision_share=None,
                          accel_w1=0.0, jerk_w1=0.0, mean_generation_time=None,
                          route_completion=0.0, n_scenarios=1)


class TestEndToEnd:
    def test_raw_playback_suite_zero_distances(self, suite_prior):
        # replaying the raw log verbatim must reproduce the reference samples
        scenarios = [synth_scenario(seed, "straight-following") for seed in range(3)]
        logs = []
        refs_a, refs_j = [], []
        for scenario in scenarios:
            h = scenario.history_steps
            ov = scenario.ov
            path = ov.trajectory.positions[h:]
            av_path = scenario.av.trajectory.positions[h:]
            logs.append(synthetic_log(path, av_path=av_path))
            a, j = kinematic_samples(path, scenario.dt)
            refs_a.append(a)
            refs_j.append(j)
        reference = (EmpiricalSamples(np.concatenate(refs_a)),
                     EmpiricalSamples(np.concatenate(refs_j)))
        assert kinematic_distances(logs, reference) == (0.0, 0.0)
        assert collision_rate(logs) == 0.0
