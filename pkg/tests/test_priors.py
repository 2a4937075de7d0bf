import itertools
import math

import numpy as np
import pytest

from adversim.kinematics import propagate
from adversim.priors import (
    EmpiricalSamples,
    KinematicPrior,
    VARIANCE_FLOOR,
    fit_prior,
    load_prior,
    log_density,
    profile_objective,
    save_prior,
    wasserstein1,
)


def constant_profile(a, steps=20, dt=0.1):
    jerks = np.zeros((steps, 2))
    return propagate((np.zeros(2), np.zeros(2), np.asarray(a, dtype=float)), jerks, dt)


class TestFitPrior:
    def test_zero_profiles_floor_variance(self):
        prior = fit_prior([constant_profile([0.0, 0.0])])
        np.testing.assert_allclose(prior.accel_mean, [0.0, 0.0])
        np.testing.assert_allclose(prior.accel_var, [VARIANCE_FLOOR, VARIANCE_FLOOR])
        np.testing.assert_allclose(prior.jerk_var, [VARIANCE_FLOOR, VARIANCE_FLOOR])

    def test_constant_acceleration(self):
        prior = fit_prior([constant_profile([1.0, 0.0])])
        np.testing.assert_allclose(prior.accel_mean, [1.0, 0.0])
        np.testing.assert_allclose(prior.accel_var, [VARIANCE_FLOOR, VARIANCE_FLOOR])

    def test_matches_two_pass_oracle(self, rng):
        profiles = []
        for _ in range(5):
            jerks = rng.normal(0, 2, (rng.integers(5, 30), 2))
            profiles.append(propagate((rng.normal(0, 1, 2),) * 3, jerks, 0.1))
        prior = fit_prior(profiles, lam=0.7)

        accels = np.vstack([p.a for p in profiles])
        jerks = np.vstack([p.j for p in profiles])
        for values, mean, var in ((accels, prior.accel_mean, prior.accel_var),
                                  (jerks, prior.jerk_mean, prior.jerk_var)):
            m = values.sum(axis=0) / len(values)
            v = ((values - m) ** 2).sum(axis=0) / len(values)
            np.testing.assert_allclose(mean, m, atol=1e-10)
            np.testing.assert_allclose(var, np.maximum(v, VARIANCE_FLOOR), atol=1e-10)

    def test_order_invariant(self, rng):
        profiles = [propagate((np.zeros(2),) * 3, rng.normal(0, 1, (10, 2)), 0.1) for _ in range(4)]
        a = fit_prior(profiles)
        b = fit_prior(profiles[::-1])
        np.testing.assert_allclose(a.accel_mean, b.accel_mean)
        np.testing.assert_allclose(a.accel_var, b.accel_var, rtol=1e-12)
        np.testing.assert_allclose(a.jerk_var, b.jerk_var, rtol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            fit_prior([])


def standard_prior(lam=0.0):
    return KinematicPrior(accel_mean=np.zeros(2), accel_var=np.ones(2),
                          jerk_mean=np.zeros(2), jerk_var=np.ones(2), lam=lam)


class TestLogDensity:
    def test_standard_normal_mode(self):
        value = log_density(standard_prior(lam=0.0), np.zeros(2), np.zeros(2))
        assert value == pytest.approx(-math.log(2 * math.pi))

    def test_closed_form_both_terms(self):
        prior = KinematicPrior(accel_mean=np.array([0.5, -1.0]), accel_var=np.array([2.0, 0.5]),
                               jerk_mean=np.array([0.0, 0.2]), jerk_var=np.array([1.5, 3.0]), lam=1.0)
        value = log_density(prior, prior.accel_mean, prior.jerk_mean)
        expected = (-0.5 * (2 * math.log(2 * math.pi) + math.log(2.0) + math.log(0.5))
                    - 0.5 * (2 * math.log(2 * math.pi) + math.log(1.5) + math.log(3.0)))
        assert value == pytest.approx(expected, abs=1e-12)

    def test_matches_independent_gaussian(self, rng):
        prior = KinematicPrior(accel_mean=rng.normal(0, 1, 2), accel_var=rng.uniform(0.1, 3, 2),
                               jerk_mean=rng.normal(0, 1, 2), jerk_var=rng.uniform(0.1, 3, 2),
                               lam=rng.uniform(0, 2))

        def gaussian(x, mu, var):
            return math.exp(-((x - mu) ** 2) / (2 * var)) / math.sqrt(2 * math.pi * var)

        for _ in range(100):
            a = rng.normal(0, 2, 2)
            j = rng.normal(0, 2, 2)
            expected = (math.log(gaussian(a[0], prior.accel_mean[0], prior.accel_var[0]))
                        + math.log(gaussian(a[1], prior.accel_mean[1], prior.accel_var[1]))
                        + prior.lam * (math.log(gaussian(j[0], prior.jerk_mean[0], prior.jerk_var[0]))
                                       + math.log(gaussian(j[1], prior.jerk_mean[1], prior.jerk_var[1]))))
            assert log_density(prior, a, j) == pytest.approx(expected, abs=1e-12)

    def test_maximized_at_means(self, rng):
        prior = KinematicPrior(accel_mean=np.array([1.0, -0.5]), accel_var=np.array([0.3, 0.8]),
                               jerk_mean=np.array([0.1, 0.0]), jerk_var=np.array([0.2, 0.4]), lam=1.3)
        at_mode = log_density(prior, prior.accel_mean, prior.jerk_mean)
        for _ in range(200):
            assert log_density(prior, prior.accel_mean + rng.normal(0, 1, 2),
                               prior.jerk_mean + rng.normal(0, 1, 2)) <= at_mode

    def test_profile_objective_consistent(self, rng):
        prior = standard_prior(lam=1.0)
        profile = propagate((np.zeros(2),) * 3, rng.normal(0, 1, (6, 2)), 0.1)
        total = sum(log_density(prior, profile.a[t + 1], profile.j[t]) for t in range(6))
        assert profile_objective(prior, profile) == pytest.approx(total, abs=1e-9)


class TestWasserstein:
    def test_unit_shift(self):
        assert wasserstein1(EmpiricalSamples([0.0]), EmpiricalSamples([1.0])) == pytest.approx(1.0)

    def test_identical_sets(self, rng):
        values = rng.uniform(0, 5, 50)
        assert wasserstein1(EmpiricalSamples(values), EmpiricalSamples(values.copy())) == 0.0

    def test_four_atom_transport(self):
        # enumerate all pairings of the 4-atom sets: optimal plan moves one
        # quarter of the mass by 1
        a = np.array([0.0, 0.0, 1.0, 1.0])
        b = np.array([0.0, 1.0, 1.0, 1.0])
        best = min(
            float(np.mean(np.abs(a[list(perm)] - b)))
            for perm in itertools.permutations(range(4))
        )
        assert best == pytest.approx(0.25)
        assert wasserstein1(EmpiricalSamples(a), EmpiricalSamples(b)) == pytest.approx(0.25)

    def test_metric_axioms(self, rng):
        for _ in range(60):
            a = EmpiricalSamples(rng.uniform(0, 4, rng.integers(2, 20)))
            b = EmpiricalSamples(rng.uniform(0, 4, rng.integers(2, 20)))
            c = EmpiricalSamples(rng.uniform(0, 4, rng.integers(2, 20)))
            dab = wasserstein1(a, b)
            assert dab >= 0.0
            assert dab == pytest.approx(wasserstein1(b, a), abs=1e-12)
            assert dab <= wasserstein1(a, c) + wasserstein1(c, b) + 1e-9

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            EmpiricalSamples([])


class TestPersistence:
    def test_round_trip(self, rng):
        prior = KinematicPrior(accel_mean=rng.normal(0, 1, 2), accel_var=rng.uniform(0.1, 2, 2),
                               jerk_mean=rng.normal(0, 1, 2), jerk_var=rng.uniform(0.1, 2, 2),
                               lam=0.8)
        restored = load_prior(save_prior(prior))
        np.testing.assert_array_equal(prior.accel_mean, restored.accel_mean)
        np.testing.assert_array_equal(prior.accel_var, restored.accel_var)
        np.testing.assert_array_equal(prior.jerk_mean, restored.jerk_mean)
        np.testing.assert_array_equal(prior.jerk_var, restored.jerk_var)
        assert prior.lam == restored.lam

    def test_invariants(self):
        with pytest.raises(ValueError):
            KinematicPrior(accel_mean=np.zeros(2), accel_var=np.zeros(2),
                           jerk_mean=np.zeros(2), jerk_var=np.ones(2))
        with pytest.raises(ValueError):
            KinematicPrior(accel_mean=np.zeros(2), accel_var=np.ones(2),
                           jerk_mean=np.zeros(2), jerk_var=np.ones(2), lam=-0.1)
