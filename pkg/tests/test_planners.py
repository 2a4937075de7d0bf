import json
import math

import numpy as np
import pytest

from adversim import planners
from adversim.kinematics import KinematicLimits, d_margin, obb_overlap, propagate
from adversim.planners import (
    IdmParams,
    LearnedPlannerWeights,
    PlanRequest,
    QuinticPolynomial,
    av_rule_planner_step,
    bv_policy_step,
    load_weights,
    mlp_forward,
    plan_features,
    plan_learned,
    plan_quintic,
    save_weights,
)
from adversim.scenario import AgentState, Lane, MapModel, points_from_local

LIMITS = KinematicLimits()


def request(**kwargs):
    defaults = dict(position=np.zeros(2), velocity=np.zeros(2), acceleration=np.zeros(2),
                    heading=0.0, goal=np.array([10.0, 0.0]), horizon_steps=40, dt=0.1,
                    limits=LIMITS)
    defaults.update(kwargs)
    return PlanRequest(**defaults)


class TestQuintic:
    def test_rest_to_rest_midpoint(self):
        req = request(goal=np.array([10.0, 0.0]), terminal_speed=0.0, horizon_steps=40)
        profile = plan_quintic(req)
        assert profile.p[20, 0] == pytest.approx(5.0, abs=1e-9)
        assert profile.p[20, 1] == pytest.approx(0.0, abs=1e-12)

    def test_goal_equals_start_is_stationary(self):
        req = request(goal=np.zeros(2), terminal_speed=0.0)
        profile = plan_quintic(req)
        np.testing.assert_allclose(profile.p, 0.0, atol=1e-12)
        np.testing.assert_allclose(profile.j, 0.0, atol=1e-12)

    def test_boundary_conditions_exact(self, rng):
        for _ in range(50):
            req = request(
                position=rng.normal(0, 20, 2), velocity=rng.normal(0, 5, 2),
                acceleration=rng.normal(0, 2, 2), heading=rng.uniform(-3, 3),
                goal=rng.normal(0, 40, 2), horizon_steps=int(rng.integers(10, 70)),
                terminal_speed=float(rng.uniform(0, 8)),
                terminal_direction=rng.normal(0, 1, 2) + [0.1, 0.0])
            profile = plan_quintic(req)
            np.testing.assert_allclose(profile.p[0], req.position, atol=1e-9)
            np.testing.assert_allclose(profile.v[0], req.velocity, atol=1e-9)
            np.testing.assert_allclose(profile.a[0], req.acceleration, atol=1e-9)
            np.testing.assert_allclose(profile.p[-1], req.goal, atol=1e-9)
            v_end = req.terminal_direction * req.terminal_speed
            np.testing.assert_allclose(profile.v[-1], v_end, atol=1e-9)
            np.testing.assert_allclose(profile.a[-1], 0.0, atol=1e-9)

    def test_minimum_jerk_among_perturbations(self, rng):
        # any degree-5 polynomial satisfying the same boundary conditions has
        # jerk cost >= the planner's (the quintic is the unique such polynomial,
        # so perturb with boundary-vanishing higher-order bumps instead)
        req = request(velocity=np.array([3.0, 1.0]), acceleration=np.array([0.5, -0.2]),
                      goal=np.array([18.0, 4.0]), terminal_speed=5.0,
                      terminal_direction=np.array([1.0, 0.0]))
        base = plan_quintic(req)
        duration = req.horizon_steps * req.dt
        times = np.arange(req.horizon_steps) * req.dt
        cost_base = float(np.sum(base.j ** 2))
        for _ in range(100):
            # bump(t) = t^3 (T - t)^3 scaled: zero value/velocity/acceleration at both ends
            amp = rng.normal(0, 0.5, 2)
            total = 0.0
            for ax in range(2):
                poly = np.polynomial.Polynomial(
                    [0, 0, 0, duration**3, -3 * duration**2, 3 * duration, -1])
                jerk_fn = poly.deriv(3)
                total += np.sum((base.j[:, ax] + amp[ax] * jerk_fn(times)) ** 2)
            assert total >= cost_base - 1e-9

    def test_integrator_identity_truncation(self, rng):
        # the sampled profile satisfies the discrete identities to O(dt^2) per
        # step; the accumulated positional inconsistency over 6 s stays small
        dt = 0.1
        for _ in range(30):
            v0 = rng.uniform(-10, 10, 2)
            req = request(
                velocity=v0, acceleration=rng.uniform(-1.5, 1.5, 2),
                goal=v0 * 6.0 + rng.uniform(-12, 12, 2), horizon_steps=60,
                terminal_speed=float(rng.uniform(0, 10)))
            profile = plan_quintic(req)
            residual = profile.p[1:] - (profile.p[:-1] + profile.v[:-1] * dt
                                        + 0.5 * profile.a[:-1] * dt * dt)
            total = float(np.linalg.norm(residual, axis=1).sum())
            assert total < 0.05

    def test_zero_horizon_rejected(self):
        with pytest.raises(ValueError):
            request(horizon_steps=0)

    def test_polynomial_derivative_consistency(self):
        poly = QuinticPolynomial(1.0, 2.0, -0.5, 4.0, 0.0, 0.3, 2.0)
        eps = 1e-6
        for t in np.linspace(0.1, 1.9, 7):
            num_vel = (poly.position(t + eps) - poly.position(t - eps)) / (2 * eps)
            assert poly.velocity(t) == pytest.approx(num_vel, abs=1e-5)
            num_acc = (poly.velocity(t + eps) - poly.velocity(t - eps)) / (2 * eps)
            assert poly.acceleration(t) == pytest.approx(num_acc, abs=1e-4)


def make_weights(rng=None, hidden=8, horizon=5, zero=False):
    layers = [(hidden, planners.FEATURE_SIZE), (hidden, hidden), (2 * horizon, hidden)]
    weights, biases = [], []
    for rows, cols in layers:
        if zero or rng is None:
            weights.append(np.zeros((rows, cols)))
            biases.append(np.zeros(rows))
        else:
            weights.append(rng.normal(0, 0.3, (rows, cols)))
            biases.append(rng.normal(0, 0.1, rows))
    return LearnedPlannerWeights(
        weights=tuple(weights), biases=tuple(biases), activation="tanh",
        input_offset=np.zeros(planners.FEATURE_SIZE), input_scale=np.ones(planners.FEATURE_SIZE),
        output_offset=np.zeros(2 * horizon), output_scale=np.ones(2 * horizon))


class TestLearnedPlanner:
    def test_zero_weights_stationary_fallback(self):
        weights = make_weights(zero=True)
        req = request(goal=np.array([7.0, 3.0]), horizon_steps=5)
        profile = plan_learned(req, weights)
        np.testing.assert_allclose(profile.p[1:], np.tile(req.position, (5, 1)), atol=1e-12)

    def test_deterministic(self, rng):
        weights = make_weights(rng)
        req = request(velocity=np.array([2.0, 0.5]), goal=np.array([9.0, 1.0]), horizon_steps=5)
        a = plan_learned(req, weights)
        b = plan_learned(req, weights)
        np.testing.assert_array_equal(a.p, b.p)

    def test_weight_file_round_trip(self, rng):
        weights = make_weights(rng)
        restored = load_weights(save_weights(weights))
        req = request(velocity=np.array([1.0, -0.3]), goal=np.array([5.0, 2.0]), horizon_steps=5)
        np.testing.assert_allclose(plan_learned(req, weights).p,
                                   plan_learned(req, restored).p, atol=1e-12)

    def test_unknown_feature_version_rejected(self, rng):
        doc = json.loads(save_weights(make_weights(rng)).decode())
        doc["feature_version"] = 99
        with pytest.raises(ValueError, match="feature_version"):
            load_weights(json.dumps(doc).encode())

    def test_dimension_mismatch_names_layer(self, rng):
        weights = make_weights(rng)
        bad = list(weights.weights)
        bad[1] = np.zeros((8, 5))
        with pytest.raises(ValueError, match="layer 1"):
            LearnedPlannerWeights(
                weights=tuple(bad), biases=weights.biases, activation="tanh",
                input_offset=weights.input_offset, input_scale=weights.input_scale,
                output_offset=weights.output_offset, output_scale=weights.output_scale)

    def test_rigid_transform_equivariance(self, rng):
        # the plan depends only on local-frame features: translate and rotate
        # the scene, the local plan is unchanged
        weights = make_weights(rng)
        req = request(position=np.array([3.0, -2.0]), velocity=np.array([2.0, 1.0]),
                      acceleration=np.array([0.2, -0.1]), heading=0.4,
                      goal=np.array([12.0, 1.0]), horizon_steps=5)
        base = plan_learned(req, weights)

        shift = np.array([40.0, -7.0])
        rot = 1.1
        c, s = math.cos(rot), math.sin(rot)
        matrix = np.array([[c, -s], [s, c]])
        moved = PlanRequest(
            position=matrix @ req.position + shift,
            velocity=matrix @ req.velocity,
            acceleration=matrix @ req.acceleration,
            heading=req.heading + rot,
            goal=matrix @ req.goal + shift,
            horizon_steps=req.horizon_steps, dt=req.dt, limits=req.limits)
        transformed = plan_learned(moved, weights)
        expected = (matrix @ base.p.T).T + shift
        np.testing.assert_allclose(transformed.p, expected, atol=1e-6)

    def test_horizon_resampling_keeps_goalward_endpoint(self, rng):
        weights = make_weights(rng, horizon=5)
        req = request(velocity=np.array([2.0, 0.0]), goal=np.array([8.0, 0.0]), horizon_steps=10)
        native = mlp_forward(weights, plan_features(
            request(velocity=np.array([2.0, 0.0]), goal=np.array([8.0, 0.0]), horizon_steps=10)))
        profile = plan_learned(req, weights)
        assert profile.p.shape == (11, 2)
        end_local = native.reshape(5, 2)[-1]
        end_global = points_from_local(end_local[None, :], AgentState(0.0, 0.0, 0.0))[0]
        np.testing.assert_allclose(profile.p[-1], end_global, atol=1e-9)


def straight_lane_map():
    lane = Lane(points=np.array([[-20.0, 0.0, 0.0], [200.0, 0.0, 0.0]]), width=3.5)
    return MapModel(lanes=(lane,))


class TestBvPolicy:
    lane = np.array([[-20.0, 0.0], [200.0, 0.0]])

    def test_equilibrium_zero_accel(self):
        params = IdmParams(desired_speed=10.0)
        cmd = bv_policy_step(np.array([0.0, 0.0]), np.array([10.0, 0.0]), 0.0,
                             self.lane, [], LIMITS, params)
        assert abs(cmd.longitudinal) < 1e-9
        assert np.linalg.norm(cmd.acceleration) < 0.05

    def test_stopped_leader_brakes_hard(self):
        leader = (AgentState(6.5, 0.0, 0.0), 4.5, 2.0, np.zeros(2))
        cmd = bv_policy_step(np.array([0.0, 0.0]), np.array([8.0, 0.0]), 0.0,
                             self.lane, [leader], LIMITS)
        assert cmd.longitudinal <= -LIMITS.a_max * 0.99

    def test_command_magnitude_bounded(self, rng):
        for _ in range(200):
            neighbors = [
                (AgentState(*rng.uniform(-5, 30, 2), rng.uniform(-1, 1)), 4.5, 2.0, rng.normal(0, 5, 2))
                for _ in range(int(rng.integers(0, 4)))
            ]
            cmd = bv_policy_step(rng.uniform(-5, 5, 2), rng.normal(0, 6, 2), rng.uniform(-1, 1),
                                 self.lane, neighbors, LIMITS)
            assert np.linalg.norm(cmd.acceleration) <= LIMITS.a_max + 1e-9

    def test_stays_in_lane_100_steps(self):
        map_model = straight_lane_map()
        p = np.array([0.0, 0.9])  # offset start, must converge to the centerline band
        v = np.array([9.0, 0.0])
        heading = 0.0
        dt = 0.1
        for _ in range(100):
            cmd = bv_policy_step(p, v, heading, self.lane, [], LIMITS)
            p = p + v * dt + 0.5 * cmd.acceleration * dt * dt
            v = v + cmd.acceleration * dt
            heading = math.atan2(v[1], v[0]) if np.hypot(*v) > 1e-3 else heading
            assert d_margin(p, map_model) >= 0.0


class TestAvRulePlanner:
    route = np.array([[-20.0, 0.0], [200.0, 0.0]])

    def rollout(self, neighbors_fn, steps=80, p=None, v=None):
        p = np.array([0.0, 0.0]) if p is None else p
        v = np.array([9.0, 0.0]) if v is None else v
        heading = 0.0
        dt = 0.1
        states = [(p.copy(), v.copy())]
        params = IdmParams(desired_speed=9.0)
        for k in range(steps):
            cmd = av_rule_planner_step(p, v, heading, self.route, neighbors_fn(k), LIMITS, params)
            p = p + v * dt + 0.5 * cmd.acceleration * dt * dt
            v = v + cmd.acceleration * dt
            heading = math.atan2(v[1], v[0]) if np.hypot(*v) > 1e-3 else heading
            states.append((p.copy(), v.copy()))
        return states

    def test_empty_road_tracks_route(self):
        states = self.rollout(lambda k: [], steps=100)
        lateral = max(abs(p[1]) for p, _ in states)
        assert lateral <= 0.5
        assert states[-1][1][0] == pytest.approx(9.0, abs=0.5)

    def test_cut_in_decelerates_within_tick(self):
        # an opponent materializes 8 m ahead moving slower: the planner must
        # command braking within one replanning tick (5 steps)
        def neighbors(k):
            if k < 2:
                return []
            return [(AgentState(8.0 + 0.9 * k, 0.0, 0.0), 4.5, 2.0, np.array([4.0, 0.0]))]

        p = np.array([0.0, 0.0])
        v = np.array([9.0, 0.0])
        heading = 0.0
        dt = 0.1
        braked = False
        params = IdmParams(desired_speed=9.0)
        for k in range(7):
            cmd = av_rule_planner_step(p, v, heading, self.route, neighbors(k), LIMITS, params)
            if k >= 2 and cmd.longitudinal < -0.5:
                braked = True
            p = p + v * dt + 0.5 * cmd.acceleration * dt * dt
            v = v + cmd.acceleration * dt
        assert braked

    def test_stops_for_stationary_obstacle(self):
        obstacle = AgentState(30.0, 0.0, 0.0)

        def neighbors(k):
            return [(obstacle, 4.5, 2.0, np.zeros(2))]

        states = self.rollout(neighbors, steps=120)
        final_p, final_v = states[-1]
        assert np.linalg.norm(final_v) < 0.5
        for p, _ in states:
            assert not obb_overlap(AgentState(p[0], p[1], 0.0), 4.5, 2.0, obstacle, 4.5, 2.0)
