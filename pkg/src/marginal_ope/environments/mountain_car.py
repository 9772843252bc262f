"""Mountain car with the fixed state aggregation used for tabular estimators.

Dynamics follow the standard textbook formulation: three actions (push left,
no push, push right), reward -1 per step until the car reaches position 0.5,
after which it sits in an absorbing state with reward 0.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..mdp import FinitePolicy, sample_batch
from .bundle import BenchmarkBundle

log = logging.getLogger(__name__)

POS_MIN, POS_MAX, GOAL = -1.2, 0.6, 0.5
VEL_MAX = 0.07
POS_SCALE, VEL_SCALE = 2**6, 2**8


class TrainingError(RuntimeError):
    """Q-learning diverged or the trained policy failed its evaluation gate."""


class Discretizer:
    """Round ``(position * 2^6, velocity * 2^8)`` to an integer grid cell."""

    def __init__(self, pos_scale: float = POS_SCALE, vel_scale: float = VEL_SCALE):
        self.pos_scale, self.vel_scale = pos_scale, vel_scale
        self.pos_lo = int(np.round(POS_MIN * pos_scale))
        self.pos_hi = int(np.round(POS_MAX * pos_scale))
        self.vel_lo = int(np.round(-VEL_MAX * vel_scale))
        self.vel_hi = int(np.round(VEL_MAX * vel_scale))
        self.num_vel = self.vel_hi - self.vel_lo + 1
        self.num_cells = (self.pos_hi - self.pos_lo + 1) * self.num_vel
        self.absorbing = self.num_cells  # extra id for the post-goal state

    @property
    def num_states(self) -> int:
        return self.num_cells + 1

    def __call__(self, pos, vel, done=None):
        p = np.round(pos * self.pos_scale).astype(np.int64) - self.pos_lo
        v = np.round(vel * self.vel_scale).astype(np.int64) - self.vel_lo
        ids = p * self.num_vel + v
        if done is not None:
            ids = np.where(done, self.absorbing, ids)
        return ids


@dataclass
class CarState:
    pos: np.ndarray
    vel: np.ndarray
    done: np.ndarray


def physics(pos, vel, actions):
    vel = np.clip(vel + 0.001 * (actions - 1) - 0.0025 * np.cos(3 * pos), -VEL_MAX, VEL_MAX)
    pos = np.clip(pos + vel, POS_MIN, POS_MAX)
    vel = np.where(pos <= POS_MIN, 0.0, vel)
    return pos, vel


class MountainCar:
    """Episodic dynamics for :func:`~marginal_ope.mdp.sample_batch`."""

    uniforms_per_step = 0
    num_actions = 3

    def __init__(self, horizon: int = 100, discretizer: Discretizer | None = None,
                 start_low: float = POS_MIN, start_high: float = GOAL):
        self.horizon = horizon
        self.discretizer = discretizer or Discretizer()
        self.start_low, self.start_high = start_low, start_high

    @property
    def num_states(self) -> int:
        return self.discretizer.num_states

    def reset(self, u):
        pos = self.start_low + u * (self.start_high - self.start_low)
        return CarState(pos, np.zeros_like(pos), np.zeros(pos.shape, dtype=bool))

    def observe(self, st: CarState):
        return self.discretizer(st.pos, st.vel, st.done)

    def transition(self, st: CarState, actions):
        """One step; returns the new state, rewards, and the episode-end mask."""
        pos, vel = physics(st.pos, st.vel, actions)
        pos = np.where(st.done, st.pos, pos)
        vel = np.where(st.done, st.vel, vel)
        reward = np.where(st.done, 0.0, -1.0)
        done = st.done | (pos >= GOAL)
        return CarState(pos, vel, done), reward, done

    def step(self, t, st, actions, u):
        nxt, reward, _ = self.transition(st, actions)
        return nxt, reward


def softmax_policy(Q: np.ndarray, temperature: float) -> FinitePolicy:
    """``pi(a|s) ∝ exp(Q(s, a) / temperature)`` with max-subtraction."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = (Q - Q.max(axis=-1, keepdims=True)) / temperature
    p = np.exp(z)
    return FinitePolicy(p / p.sum(axis=-1, keepdims=True))


@dataclass
class QLearningConfig:
    """Hyperparameters of tabular Q-learning.

    The step size for a cell visited ``k`` times is
    ``max(alpha_min, alpha / (1 + k / alpha_decay))``.
    """

    episodes: int = 50_000
    alpha: float = 0.1
    alpha_decay: float = 20_000.0
    alpha_min: float = 0.05
    epsilon: float = 0.1
    gamma: float = 1.0
    max_steps: int = 200
    num_envs: int = 256
    value_cap: float = 1e6
    seed: int = 0
    curve: list = field(default_factory=list)


def q_learning(env, discretize, num_states: int, num_actions: int,
               config: QLearningConfig | None = None) -> np.ndarray:
    """Vectorized epsilon-greedy tabular Q-learning over ``config.num_envs`` copies.

    ``env`` provides ``reset(u) -> state`` and
    ``transition(state, actions) -> (state, reward, done)``; ``discretize``
    maps a state to integer ids. Episodes end on ``done`` or after
    ``max_steps``. Mean returns of finished episodes are appended to
    ``config.curve`` every ``num_envs`` episodes.
    """
    cfg = config or QLearningConfig()
    rng = np.random.default_rng(cfg.seed)
    Q = np.zeros((num_states, num_actions))
    visits = np.zeros((num_states, num_actions))
    m = min(cfg.num_envs, cfg.episodes)
    state = env.reset(rng.random(m))
    steps = np.zeros(m, dtype=np.int64)
    ret = np.zeros(m)
    started = m
    finished = 0
    recent = []
    active = np.ones(m, dtype=bool)
    while finished < cfg.episodes:
        s = discretize(state)
        greedy = np.argmax(Q[s] + 1e-9 * rng.random((m, num_actions)), axis=1)
        explore = rng.random(m) < cfg.epsilon
        a = np.where(explore, rng.integers(num_actions, size=m), greedy)
        state, r, done = env.transition(state, a)
        s2 = discretize(state)
        target = r + cfg.gamma * np.where(done, 0.0, Q[s2].max(axis=1))
        _batched_update(Q, visits, s[active] * num_actions + a[active], target[active], cfg)
        if not np.all(np.isfinite(Q)) or np.abs(Q).max() > cfg.value_cap:
            raise TrainingError("Q-learning diverged (value magnitude above cap)")
        steps += 1
        ret += r
        end = active & (done | (steps >= cfg.max_steps))
        if np.any(end):
            finished += int(end.sum())
            recent.extend(ret[end].tolist())
            if len(recent) >= cfg.num_envs:
                cfg.curve.append(float(np.mean(recent)))
                recent = []
            fresh = env.reset(rng.random(m))
            restart = end & (started < cfg.episodes)
            n_restart = int(restart.sum())
            # keep at most `episodes` starts in total
            if started + n_restart > cfg.episodes:
                idx = np.flatnonzero(restart)[cfg.episodes - started:]
                restart[idx] = False
                n_restart = int(restart.sum())
            started += n_restart
            state = _merge(state, fresh, restart)
            steps = np.where(end, 0, steps)
            ret = np.where(end, 0.0, ret)
            active = (active & ~end) | restart
            if not np.any(active):
                break
    if recent:
        cfg.curve.append(float(np.mean(recent)))
    log.debug("q-learning finished %d episodes", finished)
    return Q


def _batched_update(Q, visits, cell, target, cfg):
    """Apply simultaneous updates so that duplicates of a cell act like sequential ones.

    The ``m`` updates hitting one cell are merged into a single step towards
    their mean target with step size ``1 - prod_j (1 - alpha_j)``, where
    ``alpha_j`` follows the cell's visit count. This is exact when the
    targets agree and reproduces running means for ``alpha = 1/k``.
    """
    if cell.size == 0:
        return
    q, v = Q.reshape(-1), visits.reshape(-1)
    cells, inv, m = np.unique(cell, return_inverse=True, return_counts=True)
    order = np.argsort(inv, kind="stable")
    first = np.cumsum(m) - m
    rank = np.empty_like(inv)
    rank[order] = np.arange(inv.size) - np.repeat(first, m)
    k = v[cell] + rank
    alpha = np.maximum(cfg.alpha_min, cfg.alpha / (1.0 + k / cfg.alpha_decay))
    with np.errstate(divide="ignore"):
        keep = np.exp(np.bincount(inv, weights=np.log1p(-np.minimum(alpha, 1.0))))
    mean_target = np.bincount(inv, weights=target) / m
    q[cells] += (1.0 - keep) * (mean_target - q[cells])
    v[cells] += m


def _merge(old, new, mask):
    if isinstance(old, np.ndarray):
        return np.where(mask, new, old)
    return type(old)(**{k: np.where(mask, getattr(new, k), getattr(old, k))
                        for k in old.__dataclass_fields__})


def greedy_success_rate(Q: np.ndarray, env: MountainCar, episodes: int = 200,
                        max_steps: int = 200, seed: int = 0,
                        start: tuple[float, float] = (-0.6, -0.4)) -> float:
    """Fraction of standard starts from which the greedy policy reaches the goal."""
    rng = np.random.default_rng(seed)
    pos = rng.uniform(*start, size=episodes)
    st = CarState(pos, np.zeros(episodes), np.zeros(episodes, dtype=bool))
    for _ in range(max_steps):
        a = np.argmax(Q[env.observe(st)], axis=1)
        st, _, _ = env.transition(st, a)
    return float(st.done.mean())


def mountain_car(horizon: int = 100, seed: int = 0, oracle_episodes: int = 100_000,
                 target_temperature: float = 1.0, behavior_temperature: float = 1.25,
                 q_config: QLearningConfig | dict | None = None,
                 min_success: float = 0.95) -> BenchmarkBundle:
    """Mountain car with softmax policies from tabular Q-learning and a Monte-Carlo oracle.

    ``q_config`` may be a plain dict of :class:`QLearningConfig` fields, as
    read from an experiment config; its seed defaults to ``seed``.
    """
    env = MountainCar(horizon)
    if isinstance(q_config, dict):
        q_config = QLearningConfig(**{"seed": seed, **q_config})
    cfg = q_config or QLearningConfig(seed=seed)
    Q = q_learning(env, env.observe, env.num_states, 3, cfg)
    success = greedy_success_rate(Q, env, seed=seed)
    if success < min_success:
        raise TrainingError(f"greedy policy reached the goal in {success:.1%} of runs")
    target = softmax_policy(Q, target_temperature)
    behavior = softmax_policy(Q, behavior_temperature)
    on_policy = sample_batch(env, target, target, oracle_episodes, seed + 1_000_003)
    returns = on_policy.returns()
    ratio_bound = float(np.max(target.table / behavior.table))
    return BenchmarkBundle(
        "mountain-car", env, behavior, target, float(returns.mean()), "monte-carlo",
        (-1.0, 0.0), oracle_se=float(returns.std(ddof=1) / np.sqrt(returns.size)),
        ratio_bound=ratio_bound,
        params={"H": horizon, "seed": seed, "greedy_success": success,
                "oracle_episodes": oracle_episodes},
        artifacts={"q_table": Q, "training_curve": list(cfg.curve)})
