"""The three-state ModelWin and ModelFail domains.

State 0 is ``s1``; states 1 and 2 are the left and right states. From ``s1``
action 0 moves left with probability ``p`` (right otherwise) and action 1
does the opposite; both side states return to ``s1``.
"""
from __future__ import annotations

import numpy as np

from ..exact import exact_values
from ..mdp import FinitePolicy, ObservationSchedule, TabularMdp
from .bundle import BenchmarkBundle

TARGET_PROBS = (0.2, 0.8)


def _skeleton(p: float) -> np.ndarray:
    T = np.zeros((3, 2, 3))
    T[0, 0] = [0.0, p, 1.0 - p]
    T[0, 1] = [0.0, 1.0 - p, p]
    T[1, :, 0] = 1.0
    T[2, :, 0] = 1.0
    return T


def model_win_mdp(horizon: int, p: float = 0.4) -> TabularMdp:
    """Rewards +1 on entering the left state and -1 on entering the right one."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    if horizon < 2:
        raise ValueError("ModelWin needs H >= 2")
    r = np.zeros((3, 2, 3))
    r[0, :, 1] = 1.0
    r[0, :, 2] = -1.0
    return TabularMdp.stationary([1.0, 0.0, 0.0], _skeleton(p), r, horizon, r_max=1.0, r_min=-1.0)


def model_fail_mdp(horizon: int, p: float = 1.0) -> TabularMdp:
    """Rewards are paid on returning to ``s1``: +1 from the left, -1 from the right."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    r = np.zeros((3, 2, 3))
    r[1, :, 0] = 1.0
    r[2, :, 0] = -1.0
    return TabularMdp.stationary([1.0, 0.0, 0.0], _skeleton(p), r, horizon, r_max=1.0, r_min=-1.0)


class ObservedMdp:
    """Tabular dynamics whose recorded state is a many-to-one observation."""

    def __init__(self, mdp: TabularMdp, observation: np.ndarray):
        self.mdp = mdp
        self.observation = np.asarray(observation)
        self.num_states = int(self.observation.max()) + 1
        self.horizon = mdp.horizon
        self.uniforms_per_step = mdp.uniforms_per_step

    def reset(self, u):
        return self.mdp.reset(u)

    def observe(self, internal):
        return self.observation[internal]

    def step(self, t, internal, actions, u):
        return self.mdp.step(t, internal, actions, u)


def model_win(horizon: int = 50, p: float = 0.4) -> BenchmarkBundle:
    """ModelWin: target plays (0.2, 0.8) at ``s1``; behavior is uniform.

    The side states have no meaningful choice, so both policies are uniform there.
    """
    mdp = model_win_mdp(horizon, p)
    target = FinitePolicy([TARGET_PROBS, (0.5, 0.5), (0.5, 0.5)])
    behavior = FinitePolicy.uniform(3, 2)
    value = exact_values(mdp, target).value
    return BenchmarkBundle("model-win", mdp, behavior, target, value, "exact-dp",
                           (-1.0, 1.0), ratio_bound=1.6, mdp=mdp, mdp_behavior=behavior,
                           mdp_target=target, params={"H": horizon, "p": p})


def model_fail(horizon: int = 50, p: float = 1.0) -> BenchmarkBundle:
    """ModelFail: only ``s1`` is observable; side states both appear as ``?`` (id 1).

    Both policies act identically at ``s1`` and ``?`` and their densities are
    logged at hidden steps too. Odd steps ``1, 3, 5, ...`` are observable.
    """
    mdp = model_fail_mdp(horizon, p)
    obs = np.array([0, 1, 1])
    target = FinitePolicy([TARGET_PROBS, TARGET_PROBS])
    behavior = FinitePolicy.uniform(2, 2)
    true_target = FinitePolicy([TARGET_PROBS] * 3)
    true_behavior = FinitePolicy.uniform(3, 2)
    value = exact_values(mdp, true_target).value
    return BenchmarkBundle("model-fail", ObservedMdp(mdp, obs), behavior, target, value,
                           "exact-dp", (-1.0, 1.0), schedule=ObservationSchedule.every(horizon, 2),
                           ratio_bound=1.6, mdp=mdp, mdp_behavior=true_behavior,
                           mdp_target=true_target, params={"H": horizon, "p": p})


def model_win_closed_form(horizon: int, p: float = 0.4) -> float:
    """Expected reward per visit to ``s1`` times the number of visits."""
    a1, a2 = TARGET_PROBS
    per_visit = a1 * (2 * p - 1) + a2 * (1 - 2 * p)
    return (horizon + 1) // 2 * per_visit


def model_fail_closed_form(horizon: int, p: float = 1.0) -> float:
    a1, a2 = TARGET_PROBS
    per_cycle = a1 * (2 * p - 1) + a2 * (1 - 2 * p)
    return horizon // 2 * per_cycle
