"""Finite-state episodic MDPs, policies, and logged episode batches.

Steps are indexed ``t = 1..H`` in the documentation and ``0..H-1`` in arrays.
A batch stores ``H + 1`` states per episode so that ``s_{H+1}`` is available.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Optional, Protocol, Sequence

import numpy as np

SIMPLEX_ATOL = 1e-12


class InvalidMdpError(ValueError):
    """Raised when an MDP or policy violates its probability invariants."""


class SamplingError(RuntimeError):
    """Raised when a sampled step violates coverage or ratio bounds."""


def _check_simplex(arr: np.ndarray, what: str, atol: float = SIMPLEX_ATOL) -> None:
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise InvalidMdpError(f"{what} has negative or non-finite entries")
    sums = arr.sum(axis=-1)
    bad = np.abs(sums - 1.0) > atol
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise InvalidMdpError(f"{what}{list(idx)} sums to {sums[idx]!r}, not 1")


def _inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise categorical draw: ``probs`` is (n, k), ``u`` is (n,)."""
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


@dataclass(frozen=True)
class TabularMdp:
    """Nonstationary finite MDP with horizon ``H``.

    Parameters
    ----------
    initial_dist : array, shape (S,)
    transitions : array, shape (H, S, A, S)
        ``transitions[t, s, a, s']`` is the probability of ``s'`` after taking
        ``a`` in ``s`` at step ``t + 1``.
    reward_mean : array, shape (H, S, A, S)
    r_max, r_min : float
        Declared reward bounds. ``r_min`` defaults to 0; benchmark domains
        with signed rewards declare a negative lower bound.
    reward_noise : float
        Half-width ``c`` of additive Uniform[-c, c] reward noise.
    """

    initial_dist: np.ndarray
    transitions: np.ndarray
    reward_mean: np.ndarray
    r_max: float = 1.0
    r_min: float = 0.0
    reward_noise: float = 0.0

    def __post_init__(self):
        d1 = np.asarray(self.initial_dist, dtype=float)
        T = np.asarray(self.transitions, dtype=float)
        r = np.asarray(self.reward_mean, dtype=float)
        if T.ndim != 4 or T.shape[1] != T.shape[3] or T.shape[1] != d1.shape[0]:
            raise InvalidMdpError(f"transitions must be (H, S, A, S); got {T.shape}")
        if r.shape != T.shape:
            raise InvalidMdpError(f"reward_mean shape {r.shape} != transitions shape {T.shape}")
        _check_simplex(d1, "initial_dist")
        _check_simplex(T, "transitions")
        if self.r_max <= 0 or self.r_min > self.r_max:
            raise InvalidMdpError("reward bounds must satisfy r_min <= r_max, r_max > 0")
        if np.any(r < self.r_min - 1e-12) or np.any(r > self.r_max + 1e-12):
            raise InvalidMdpError("reward_mean outside [r_min, r_max]")
        if self.reward_noise < 0:
            raise InvalidMdpError("reward_noise must be nonnegative")
        for name, arr in (("initial_dist", d1), ("transitions", T), ("reward_mean", r)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def horizon(self) -> int:
        return self.transitions.shape[0]

    @property
    def num_states(self) -> int:
        return self.transitions.shape[1]

    @property
    def num_actions(self) -> int:
        return self.transitions.shape[2]

    @property
    def reward_bounds(self) -> tuple[float, float]:
        return (self.r_min, self.r_max)

    @property
    def noise_variance(self) -> float:
        return self.reward_noise**2 / 3.0

    @property
    def is_stationary(self) -> bool:
        return bool(np.all(self.transitions == self.transitions[:1]))

    def expected_reward(self) -> np.ndarray:
        """Reward marginalized over the next state, shape (H, S, A)."""
        return np.einsum("tsan,tsan->tsa", self.transitions, self.reward_mean)

    @classmethod
    def stationary(cls, initial_dist, transitions, reward_mean, horizon: int, **kw) -> "TabularMdp":
        """Broadcast time-invariant (S, A, S) tables over ``horizon`` steps."""
        T = np.broadcast_to(np.asarray(transitions, float), (horizon,) + np.shape(transitions))
        r = np.broadcast_to(np.asarray(reward_mean, float), T.shape)
        return cls(initial_dist, T.copy(), r.copy(), **kw)

    # -- EpisodicDynamics protocol -------------------------------------------------

    uniforms_per_step = 2

    def reset(self, u: np.ndarray) -> np.ndarray:
        n = u.shape[0]
        return _inverse_cdf(np.broadcast_to(self.initial_dist, (n, self.num_states)), u)

    def observe(self, internal: np.ndarray) -> np.ndarray:
        return internal

    def step(self, t: int, internal: np.ndarray, actions: np.ndarray, u: np.ndarray):
        probs = self.transitions[t, internal, actions]
        nxt = _inverse_cdf(probs, u[:, 0])
        rew = self.reward_mean[t, internal, actions, nxt]
        if self.reward_noise > 0:
            rew = rew + self.reward_noise * (2.0 * u[:, 1] - 1.0)
        return nxt, rew


class Policy(Protocol):
    """Anything that can draw actions and report their densities."""

    def sample(self, t: int, states: np.ndarray, u: np.ndarray) -> np.ndarray: ...

    def density(self, t: int, states: np.ndarray, actions: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class FinitePolicy:
    """Tabular policy ``pi(a|s)``; a (S, A) table is broadcast over steps."""

    table: np.ndarray

    def __post_init__(self):
        tab = np.asarray(self.table, dtype=float)
        if tab.ndim not in (2, 3):
            raise InvalidMdpError("policy table must be (S, A) or (H, S, A)")
        _check_simplex(tab, "policy")
        tab.setflags(write=False)
        object.__setattr__(self, "table", tab)

    @property
    def num_states(self) -> int:
        return self.table.shape[-2]

    @property
    def num_actions(self) -> int:
        return self.table.shape[-1]

    @property
    def stationary(self) -> bool:
        return self.table.ndim == 2

    def probs(self, t: int) -> np.ndarray:
        return self.table if self.table.ndim == 2 else self.table[t]

    def as_tensor(self, horizon: int) -> np.ndarray:
        """Per-step tables, shape (H, S, A)."""
        if self.table.ndim == 3:
            return self.table
        return np.broadcast_to(self.table, (horizon,) + self.table.shape)

    def sample(self, t, states, u):
        return _inverse_cdf(self.probs(t)[states], u)

    def density(self, t, states, actions):
        return self.probs(t)[states, actions]

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> "FinitePolicy":
        return cls(np.full((num_states, num_actions), 1.0 / num_actions))


@dataclass(frozen=True)
class DensityPolicyPair:
    """Behavior and target policies plus the declared ratio bound ``1/eta``."""

    behavior: Any
    target: Any
    ratio_bound: float = np.inf

    def ratio(self, t, states, actions) -> np.ndarray:
        mu = self.behavior.density(t, states, actions)
        pi = self.target.density(t, states, actions)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(mu > 0, pi / mu, np.inf)


@dataclass(frozen=True)
class ObservationSchedule:
    """Per-step observability flags; step 1 must be observable."""

    observable: np.ndarray

    def __post_init__(self):
        obs = np.asarray(self.observable, dtype=bool)
        if obs.ndim != 1 or obs.size == 0 or not obs[0]:
            raise ValueError("schedule must be a nonempty 1-D mask with step 1 observable")
        obs.setflags(write=False)
        object.__setattr__(self, "observable", obs)

    @property
    def horizon(self) -> int:
        return self.observable.size

    @property
    def checkpoints(self) -> np.ndarray:
        """Zero-based indices of observable steps."""
        return np.flatnonzero(self.observable)

    def anchor(self) -> np.ndarray:
        """For every step, the index of the most recent observable step."""
        idx = np.where(self.observable, np.arange(self.horizon), -1)
        return np.maximum.accumulate(idx)

    def gap_lengths(self) -> np.ndarray:
        ends = np.append(self.checkpoints[1:], self.horizon)
        return ends - self.checkpoints

    @classmethod
    def every(cls, horizon: int, period: int) -> "ObservationSchedule":
        return cls(np.arange(horizon) % period == 0)

    @classmethod
    def full(cls, horizon: int) -> "ObservationSchedule":
        return cls(np.ones(horizon, dtype=bool))


@dataclass(frozen=True)
class Episode:
    states: np.ndarray  # (H + 1,)
    actions: np.ndarray  # (H,)
    rewards: np.ndarray
    behavior_density: np.ndarray
    target_density: np.ndarray

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]

    @property
    def ratios(self) -> np.ndarray:
        return self.target_density / self.behavior_density


@dataclass(frozen=True)
class EpisodeBatch:
    """``n`` logged episodes stored as (n, H) arrays.

    ``states`` has shape (n, H + 1). ``num_actions`` is ``None`` for
    continuous action records.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    behavior_density: np.ndarray
    target_density: np.ndarray
    num_states: int
    num_actions: Optional[int] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n, H = self.actions.shape
        if n < 1:
            raise ValueError("a batch needs at least one episode")
        if self.states.shape != (n, H + 1):
            raise ValueError(f"states must be ({n}, {H + 1}); got {self.states.shape}")
        for name in ("rewards", "behavior_density", "target_density"):
            if getattr(self, name).shape != (n, H):
                raise ValueError(f"{name} must be ({n}, {H})")
        if np.any(self.behavior_density <= 0):
            raise ValueError("logged behavior densities must be strictly positive")
        for name in ("states", "actions", "rewards", "behavior_density", "target_density"):
            getattr(self, name).setflags(write=False)

    @property
    def n(self) -> int:
        return self.actions.shape[0]

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    @property
    def finite_actions(self) -> bool:
        return self.num_actions is not None

    @property
    def ratios(self) -> np.ndarray:
        """Per-step ratios ``rho_t``, shape (n, H)."""
        return self.target_density / self.behavior_density

    def cumulative_ratios(self) -> np.ndarray:
        """Prefix products ``rho_{0:t}``, shape (n, H)."""
        return np.cumprod(self.ratios, axis=1)

    def episode(self, i: int) -> Episode:
        return Episode(self.states[i], self.actions[i], self.rewards[i],
                       self.behavior_density[i], self.target_density[i])

    def subset(self, idx) -> "EpisodeBatch":
        idx = np.asarray(idx)
        return EpisodeBatch(
            self.states[idx].copy(), self.actions[idx].copy(), self.rewards[idx].copy(),
            self.behavior_density[idx].copy(), self.target_density[idx].copy(),
            self.num_states, self.num_actions, dict(self.metadata),
        )

    def returns(self) -> np.ndarray:
        return self.rewards.sum(axis=1)

    @classmethod
    def from_episodes(cls, episodes: Sequence[Episode], num_states: int,
                      num_actions: Optional[int] = None, metadata=None) -> "EpisodeBatch":
        horizons = {ep.horizon for ep in episodes}
        if len(horizons) != 1:
            raise ValueError("all episodes must share one horizon")
        stack = lambda name: np.stack([getattr(ep, name) for ep in episodes])
        return cls(stack("states"), stack("actions"), stack("rewards"),
                   stack("behavior_density"), stack("target_density"),
                   num_states, num_actions, dict(metadata or {}))


def cumulative_ratios(episode: Episode | EpisodeBatch) -> np.ndarray:
    """Prefix products of the per-step importance ratios."""
    return np.cumprod(episode.ratios, axis=-1)


def sample_batch(dynamics, behavior, target, n: int, rng_seed: int,
                 ratio_bound: float = np.inf, metadata=None) -> EpisodeBatch:
    """Roll out ``n`` episodes of ``behavior`` and log both policies' densities.

    All randomness for episode ``i`` comes from row ``i`` of a single
    ``(n, k)`` uniform draw, so a batch of ``n`` episodes is a prefix of any
    larger batch with the same seed.

    ``dynamics`` follows the interface of :class:`TabularMdp`: ``horizon``,
    ``num_states``, ``uniforms_per_step``, ``reset``, ``observe`` and ``step``.
    Policies act on observed state ids.
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    if isinstance(behavior, DensityPolicyPair):
        behavior, target, ratio_bound = behavior.behavior, behavior.target, behavior.ratio_bound
    H = dynamics.horizon
    k = 1 + dynamics.uniforms_per_step
    rng = np.random.default_rng(rng_seed)
    U = rng.random((n, 1 + H * k))

    internal = dynamics.reset(U[:, 0])
    obs = dynamics.observe(internal)
    finite = getattr(behavior, "num_actions", None)
    states = np.empty((n, H + 1), dtype=np.int64)
    actions = np.empty((n, H), dtype=np.int64 if finite else float)
    rewards = np.empty((n, H))
    mu_d = np.empty((n, H))
    pi_d = np.empty((n, H))
    states[:, 0] = obs
    for t in range(H):
        u = U[:, 1 + t * k: 1 + (t + 1) * k]
        a = behavior.sample(t, obs, u[:, 0])
        mu = behavior.density(t, obs, a)
        pi = target.density(t, obs, a)
        if np.any(mu <= 0):
            raise SamplingError(f"behavior density is zero for a sampled action at step {t + 1}")
        if np.any(pi / mu > ratio_bound * (1 + 1e-12)):
            raise SamplingError(f"ratio exceeds declared bound {ratio_bound} at step {t + 1}")
        internal, r = dynamics.step(t, internal, a, u[:, 1:])
        obs = dynamics.observe(internal)
        actions[:, t] = a
        rewards[:, t] = r
        mu_d[:, t] = mu
        pi_d[:, t] = pi
        states[:, t + 1] = obs
    meta = {"seed": int(rng_seed)} | dict(metadata or {})
    return EpisodeBatch(states, actions, rewards, mu_d, pi_d,
                        dynamics.num_states, finite, meta)


def sample_episode(dynamics, behavior, target, rng_seed: int, **kw) -> Episode:
    """Single-episode convenience wrapper around :func:`sample_batch`."""
    return sample_batch(dynamics, behavior, target, 1, rng_seed, **kw).episode(0)


# -- JSON interchange ----------------------------------------------------------------


def _field_line(text: str, key: str) -> int:
    pos = text.find(f'"{key}"')
    return text.count("\n", 0, pos) + 1 if pos >= 0 else 1


def mdp_from_json(text: str) -> TabularMdp:
    """Parse and validate an MDP document.

    The document holds ``S, A, H, d1, T, r, R_max`` with ``T`` and ``r`` nested
    ``H x S x A x S``; optional ``r_min`` and ``noise``. Validation failures
    raise :class:`InvalidMdpError` with the line of the offending field.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidMdpError(f"line {exc.lineno}: malformed JSON: {exc.msg}") from None
    missing = [k for k in ("S", "A", "H", "d1", "T", "r", "R_max") if k not in doc]
    if missing:
        raise InvalidMdpError(f"line 1: missing fields {missing}")
    S, A, H = doc["S"], doc["A"], doc["H"]
    for key in ("S", "A", "H"):
        if not isinstance(doc[key], int) or doc[key] < 1:
            raise InvalidMdpError(f"line {_field_line(text, key)}: {key} must be a positive integer")
    expected = {"d1": (S,), "T": (H, S, A, S), "r": (H, S, A, S)}
    arrays = {}
    for key, shape in expected.items():
        try:
            arr = np.asarray(doc[key], dtype=float)
        except (TypeError, ValueError):
            raise InvalidMdpError(f"line {_field_line(text, key)}: {key} is not a numeric array") from None
        if arr.shape != shape:
            raise InvalidMdpError(
                f"line {_field_line(text, key)}: {key} has shape {arr.shape}, expected {shape}")
        arrays[key] = arr
    checks = (("d1", arrays["d1"]), ("T", arrays["T"]))
    for key, arr in checks:
        try:
            _check_simplex(arr, key)
        except InvalidMdpError as exc:
            raise InvalidMdpError(f"line {_field_line(text, key)}: {exc}") from None
    try:
        return TabularMdp(arrays["d1"], arrays["T"], arrays["r"], r_max=float(doc["R_max"]),
                          r_min=float(doc.get("r_min", 0.0)), reward_noise=float(doc.get("noise", 0.0)))
    except InvalidMdpError as exc:
        raise InvalidMdpError(f"line {_field_line(text, 'r')}: {exc}") from None


def mdp_to_json(mdp: TabularMdp) -> str:
    doc = {
        "S": mdp.num_states, "A": mdp.num_actions, "H": mdp.horizon,
        "d1": mdp.initial_dist.tolist(), "T": mdp.transitions.tolist(),
        "r": mdp.reward_mean.tolist(), "R_max": mdp.r_max, "r_min": mdp.r_min,
        "noise": mdp.reward_noise,
    }
    return json.dumps(doc, indent=1)


def load_mdp(path) -> TabularMdp:
    with open(path) as fh:
        return mdp_from_json(fh.read())


def random_mdp(rng: np.random.Generator, num_states: int, num_actions: int, horizon: int,
               r_max: float = 1.0, sparsity: float = 0.0) -> TabularMdp:
    """Random nonstationary MDP used by property tests and demos."""
    T = rng.random((horizon, num_states, num_actions, num_states))
    if sparsity > 0:
        T = T * (rng.random(T.shape) >= sparsity)
        T[..., 0] += 1e-3
    T /= T.sum(axis=-1, keepdims=True)
    d1 = rng.random(num_states)
    d1 /= d1.sum()
    r = r_max * rng.random(T.shape)
    return TabularMdp(d1, T, r, r_max=r_max)


def random_policy(rng: np.random.Generator, num_states: int, num_actions: int,
                  floor: float = 0.0) -> FinitePolicy:
    p = rng.random((num_states, num_actions)) + floor
    return FinitePolicy(p / p.sum(axis=1, keepdims=True))
