import numpy as np
import pytest

from adversim.kinematics import profile_from_positions
from adversim.priors import fit_prior
from adversim.scenario import TEMPLATES, synth_scenario


@pytest.fixture(scope="session")
def suite_prior():
    """Prior fit on a small slice of regular logs, shared across tests."""
    profiles = []
    for template in TEMPLATES:
        for seed in range(5):
            scenario = synth_scenario(seed, template)
            profiles += [
                profile_from_positions(agent.trajectory.positions, scenario.dt)
                for agent in scenario.agents
            ]
    return fit_prior(profiles)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260809)
