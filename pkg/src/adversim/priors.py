"""Human-driving kinematic distributions and the realism objective they induce.

Accelerations and jerks observed in regular logs are modeled as axis-independent
Gaussians. Their log density is the quantity the intention optimizer maximizes,
which makes the inner problem a convex quadratic in the jerk sequence. The
Wasserstein-1 distance between magnitude samples is the realism metric.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import wasserstein_distance

from adversim.kinematics import ControlProfile

VARIANCE_FLOOR = 1e-4

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class KinematicPrior:
    accel_mean: np.ndarray  # (2,) m/s^2
    accel_var: np.ndarray   # (2,) per-axis variance
    jerk_mean: np.ndarray   # (2,) m/s^3
    jerk_var: np.ndarray    # (2,)
    lam: float = 1.0        # jerk weight in the objective

    def __post_init__(self):
        for name in ("accel_mean", "accel_var", "jerk_mean", "jerk_var"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(2)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.accel_var < VARIANCE_FLOOR) or np.any(self.jerk_var < VARIANCE_FLOOR):
            raise ValueError(f"variances must be >= {VARIANCE_FLOOR}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


@dataclass(frozen=True, eq=False)
class EmpiricalSamples:
    """Scalar magnitude samples of one kinematic channel."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=float).ravel()
        if arr.size == 0:
            raise ValueError("empty sample set")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)


def fit_prior(profiles: list[ControlProfile], lam: float = 1.0) -> KinematicPrior:
    """Per-axis sample mean/variance of accelerations and jerks pooled over profiles."""
    if not profiles:
        raise ValueError("fit_prior requires at least one profile")
    accels = np.concatenate([p.a for p in profiles], axis=0)
    jerks = np.concatenate([p.j for p in profiles], axis=0)
    if accels.shape[0] < 2:
        raise ValueError("fit_prior requires profiles with >= 2 steps")

    def stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mean = x.mean(axis=0)
        var = np.maximum(x.var(axis=0), VARIANCE_FLOOR)
        return mean, var

    a_mean, a_var = stats(accels)
    j_mean, j_var = stats(jerks) if jerks.shape[0] else (np.zeros(2), np.full(2, VARIANCE_FLOOR))
    return KinematicPrior(accel_mean=a_mean, accel_var=a_var, jerk_mean=j_mean, jerk_var=j_var, lam=lam)


def log_density(prior: KinematicPrior, a: np.ndarray, j: np.ndarray) -> float:
    """log N(a; mu_a, var_a) + lambda * log N(j; mu_j, var_j), axes independent."""
    a = np.asarray(a, dtype=float).reshape(2)
    j = np.asarray(j, dtype=float).reshape(2)
    log_a = -0.5 * np.sum(_LOG_2PI + np.log(prior.accel_var) + (a - prior.accel_mean) ** 2 / prior.accel_var)
    log_j = -0.5 * np.sum(_LOG_2PI + np.log(prior.jerk_var) + (j - prior.jerk_mean) ** 2 / prior.jerk_var)
    return float(log_a + prior.lam * log_j)


def profile_objective(prior: KinematicPrior, profile: ControlProfile) -> float:
    """Summed realism objective over a profile: decision accelerations and all jerks."""
    a = profile.a[1:]  # a[0] is the fixed initial condition, not a decision
    j = profile.j
    log_a = -0.5 * np.sum(_LOG_2PI + np.log(prior.accel_var) + (a - prior.accel_mean) ** 2 / prior.accel_var)
    log_j = -0.5 * np.sum(_LOG_2PI + np.log(prior.jerk_var) + (j - prior.jerk_mean) ** 2 / prior.jerk_var)
    return float(log_a + prior.lam * log_j)


def wasserstein1(a: EmpiricalSamples, b: EmpiricalSamples) -> float:
    """Exact W1 between 1-D empirical distributions (sorted-quantile integration)."""
    return float(wasserstein_distance(a.values, b.values))


def prior_to_dict(prior: KinematicPrior) -> dict:
    return {
        "accel_mean": prior.accel_mean.tolist(),
        "accel_var": prior.accel_var.tolist(),
        "jerk_mean": prior.jerk_mean.tolist(),
        "jerk_var": prior.jerk_var.tolist(),
        "lambda": prior.lam,
    }


def prior_from_dict(doc: dict) -> KinematicPrior:
    return KinematicPrior(
        accel_mean=np.asarray(doc["accel_mean"], dtype=float),
        accel_var=np.asarray(doc["accel_var"], dtype=float),
        jerk_mean=np.asarray(doc["jerk_mean"], dtype=float),
        jerk_var=np.asarray(doc["jerk_var"], dtype=float),
        lam=float(doc["lambda"]),
    )


def save_prior(prior: KinematicPrior) -> bytes:
    return json.dumps(prior_to_dict(prior)).encode("utf-8")


def load_prior(data: bytes | str) -> KinematicPrior:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return prior_from_dict(json.loads(data))
