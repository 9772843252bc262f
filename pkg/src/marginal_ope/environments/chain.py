"""Two-state non-mixing chain with continuous actions on [0, 1].

The agent starts in state 1. At every step the environment draws a fresh
interval of width ``1/H`` inside ``[0, 0.5]``; an action inside it moves the
agent to the absorbing state 0. Occupying state 0 at step ``t >= ceil(H/2)``
pays reward 1.
"""
from __future__ import annotations

import math

import numpy as np

from ..mdp import FinitePolicy, TabularMdp
from .bundle import BenchmarkBundle

TARGET_LOW_DENSITY = 1.9
TARGET_HIGH_DENSITY = 0.1


class TimeVaryingChain:
    uniforms_per_step = 1
    num_states = 2

    def __init__(self, horizon: int):
        if horizon < 4:
            raise ValueError("the time-varying chain needs H >= 4")
        self.horizon = horizon
        self.first_rewarded = math.ceil(horizon / 2)  # 1-based step

    def reset(self, u):
        return np.ones(u.shape[0], dtype=np.int64)

    def observe(self, internal):
        return internal

    def interval_centers(self, u):
        half = 0.5 / self.horizon
        return half + u * (0.5 - 2 * half)

    def step(self, t, internal, actions, u):
        center = self.interval_centers(u[:, 0])
        hit = np.abs(actions - center) <= 0.5 / self.horizon
        reward = ((internal == 0) & (t + 1 >= self.first_rewarded)).astype(float)
        nxt = np.where((internal == 1) & hit, 0, internal)
        return nxt, reward


class UniformActionPolicy:
    """Density 1 on [0, 1] in every state."""

    num_actions = None

    def sample(self, t, states, u):
        return u.copy()

    def density(self, t, states, actions):
        return np.ones_like(actions, dtype=float)


class SkewedActionPolicy:
    """In state 1: density 1.9 on [0, 0.5] and 0.1 on (0.5, 1]; uniform in state 0."""

    num_actions = None

    def sample(self, t, states, u):
        low_mass = TARGET_LOW_DENSITY * 0.5
        skewed = np.where(u < low_mass, u / TARGET_LOW_DENSITY,
                          0.5 + (u - low_mass) / TARGET_HIGH_DENSITY)
        return np.where(states == 1, skewed, u)

    def density(self, t, states, actions):
        skewed = np.where(actions <= 0.5, TARGET_LOW_DENSITY, TARGET_HIGH_DENSITY)
        return np.where(states == 1, skewed, 1.0)


def reduced_chain_mdp(horizon: int) -> TabularMdp:
    """Exact two-action reduction: action 0 means "inside the interval"."""
    T = np.zeros((2, 2, 2))
    T[0, :, 0] = 1.0
    T[1, 0, 0] = 1.0
    T[1, 1, 1] = 1.0
    r = np.zeros((horizon, 2, 2, 2))
    first = math.ceil(horizon / 2)
    r[first - 1:, 0] = 1.0
    T = np.broadcast_to(T, (horizon, 2, 2, 2)).copy()
    return TabularMdp([0.0, 1.0], T, r, r_max=1.0)


def reduced_policy(horizon: int, exit_rate: float) -> FinitePolicy:
    p = exit_rate / horizon
    return FinitePolicy([[0.5, 0.5], [p, 1.0 - p]])


def chain_closed_form(horizon: int, exit_rate: float = TARGET_LOW_DENSITY) -> float:
    """``sum_{t=ceil(H/2)}^{H} 1 - (1 - rate/H)^(t-1)``."""
    q = 1.0 - exit_rate / horizon
    return float(sum(1.0 - q ** (t - 1) for t in range(math.ceil(horizon / 2), horizon + 1)))


def time_varying_chain(horizon: int = 64) -> BenchmarkBundle:
    """Non-mixing two-state chain with continuous actions; uniform behavior, skewed target."""
    dyn = TimeVaryingChain(horizon)
    mdp = reduced_chain_mdp(horizon)
    target_red = reduced_policy(horizon, TARGET_LOW_DENSITY)
    behavior_red = reduced_policy(horizon, 1.0)
    value = chain_closed_form(horizon)
    return BenchmarkBundle("time-varying-chain", dyn, UniformActionPolicy(), SkewedActionPolicy(),
                           value, "closed-form", (0.0, 1.0), ratio_bound=TARGET_LOW_DENSITY,
                           mdp=mdp, mdp_behavior=behavior_red, mdp_target=target_red,
                           params={"H": horizon})
