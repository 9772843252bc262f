import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from marginal_ope.mdp import random_mdp, random_policy, sample_batch

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# filled by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_problem(seed, S=4, A=3, H=6, n=200, floor=0.2, noise=0.0):
    """Random MDP, a well-covered behavior policy, a target policy and a batch."""
    g = np.random.default_rng(seed)
    mdp = random_mdp(g, S, A, H)
    if noise:
        from marginal_ope.mdp import TabularMdp
        mdp = TabularMdp(mdp.initial_dist, mdp.transitions, mdp.reward_mean,
                         r_max=1.0 + noise, r_min=-noise, reward_noise=noise)
    mu = random_policy(g, S, A, floor=floor)
    pi = random_policy(g, S, A)
    batch = sample_batch(mdp, mu, pi, n, int(g.integers(2**31)))
    return mdp, mu, pi, batch


@pytest.fixture
def problem():
    return make_problem(7)
