"""Plug-in estimates of per-step state marginals and their ratios.

The behavior marginals come from counting; target marginals follow the
importance-weighted forward recursion

    d_{t+1}(s) = (1/n) sum_i w_t(s_t^i) rho_t^i 1(s_{t+1}^i = s),
    w_t(s) = d_t^pi(s) / d_t^mu(s)   (0 when s is unvisited at step t),

optionally self-normalized at every step. With an observation schedule the
recursion jumps between observable steps and ``rho`` becomes the product of
the action ratios across the hidden gap.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .mdp import EpisodeBatch, ObservationSchedule


class DegenerateBatchError(ValueError):
    """Every episode reaching a step carries zero weight."""


@dataclass(frozen=True)
class MarginalEstimate:
    """Estimated marginals and ratio weights, arrays of shape (H, S).

    Rows of unobserved steps (under a schedule) are zero.
    """

    behavior: np.ndarray
    target: np.ndarray
    weights: np.ndarray
    counts: np.ndarray
    degenerate_steps: tuple = ()
    schedule: Optional[ObservationSchedule] = None

    @property
    def horizon(self) -> int:
        return self.behavior.shape[0]

    @classmethod
    def from_oracle(cls, d_pi: np.ndarray, d_mu: np.ndarray) -> "MarginalEstimate":
        """Wrap exact marginals, e.g. to run MIS with the true ratios."""
        w = np.zeros_like(d_pi)
        np.divide(d_pi, d_mu, out=w, where=d_mu > 0)
        return cls(d_mu, d_pi, w, np.zeros(d_mu.shape, dtype=np.int64))


def state_counts(batch: EpisodeBatch) -> np.ndarray:
    """Visit counts ``n_{s_t}`` for steps ``1..H``, shape (H, S)."""
    S, H = batch.num_states, batch.horizon
    flat = batch.states[:, :H] + S * np.arange(H)
    return np.bincount(flat.ravel(), minlength=S * H).reshape(H, S)


def behavior_marginals(batch: EpisodeBatch) -> np.ndarray:
    """Empirical state frequencies per step, shape (H, S)."""
    return state_counts(batch) / batch.n


def _ratio(d_pi: np.ndarray, d_mu: np.ndarray) -> np.ndarray:
    w = np.zeros_like(d_pi)
    np.divide(d_pi, d_mu, out=w, where=d_mu > 0)
    return w


def estimate_marginals(batch: EpisodeBatch, selfnorm: bool = True,
                       schedule: Optional[ObservationSchedule] = None,
                       on_degenerate: str = "zero") -> MarginalEstimate:
    """Run the forward recursion for the target marginals.

    Parameters
    ----------
    selfnorm : bool
        Divide each step's estimate by its total weight so it sums to one.
    schedule : ObservationSchedule, optional
        Restrict the recursion to observable steps.
    on_degenerate : {"zero", "raise"}
        What to do when every weight at a step is zero. ``"zero"`` emits
        zero marginals from that point on and records the step.
    """
    H, S, n = batch.horizon, batch.num_states, batch.n
    if schedule is not None and schedule.horizon != H:
        raise ValueError("schedule horizon does not match the batch")
    checkpoints = np.arange(H) if schedule is None else schedule.checkpoints
    counts = state_counts(batch)
    d_mu = counts / n
    d_pi = np.zeros((H, S))
    w = np.zeros((H, S))
    if schedule is not None:
        d_mu = np.where(schedule.observable[:, None], d_mu, 0.0)
    rho = batch.ratios
    degenerate = []
    d_pi[checkpoints[0]] = d_mu[checkpoints[0]]
    for k, c in enumerate(checkpoints):
        w[c] = _ratio(d_pi[c], d_mu[c])
        if k + 1 == len(checkpoints):
            break
        nxt = checkpoints[k + 1]
        coef = w[c][batch.states[:, c]] * np.prod(rho[:, c:nxt], axis=1)
        num = np.bincount(batch.states[:, nxt], weights=coef, minlength=S) / n
        if selfnorm:
            total = coef.sum() / n
            if total <= 0:
                if on_degenerate == "raise":
                    raise DegenerateBatchError(f"zero normalizer at step {nxt + 1}")
                degenerate.append(int(nxt) + 1)
                continue
            d_pi[nxt] = num / total
        else:
            d_pi[nxt] = num
    if degenerate:
        warnings.warn(f"degenerate marginal steps {degenerate}", RuntimeWarning, stacklevel=2)
    return MarginalEstimate(d_mu, d_pi, w, counts, tuple(degenerate), schedule)


def target_marginals_raw(batch: EpisodeBatch) -> np.ndarray:
    """Unnormalized recursive estimate of ``d_t^pi``, shape (H, S)."""
    return estimate_marginals(batch, selfnorm=False).target


def target_marginals_selfnorm(batch: EpisodeBatch) -> np.ndarray:
    """Self-normalized recursive estimate; raises :class:`DegenerateBatchError`
    when a step's total weight vanishes."""
    return estimate_marginals(batch, selfnorm=True, on_degenerate="raise").target


def transition_is(batch: EpisodeBatch, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Importance-weighted transition matrix at zero-based step ``t``.

    Returns ``P[s', s]`` (column ``s`` estimates ``P^pi(.|s)``) and the mask of
    states visited at step ``t``. Unvisited columns are zero; columns need not
    sum to one.
    """
    S = batch.num_states
    s, s_next = batch.states[:, t], batch.states[:, t + 1]
    counts = np.bincount(s, minlength=S)
    joint = np.bincount(s_next * S + s, weights=batch.ratios[:, t],
                        minlength=S * S).reshape(S, S)
    P = np.zeros((S, S))
    np.divide(joint, counts[None, :], out=P, where=counts[None, :] > 0)
    return P, counts > 0


def marginals_by_transition_chain(batch: EpisodeBatch) -> np.ndarray:
    """``d_{t+1} = P_t d_t`` starting from the empirical ``d_1``."""
    H = batch.horizon
    d = np.empty((H, batch.num_states))
    d[0] = behavior_marginals(batch)[0]
    for t in range(H - 1):
        P, _ = transition_is(batch, t)
        d[t + 1] = P @ d[t]
    return d


def reward_is(batch: EpisodeBatch, t: int) -> tuple[np.ndarray, np.ndarray]:
    """``r_t^pi(s) = (1/n_s) sum_i rho_t^i r_t^i 1(s_t^i = s)``; NaN where unvisited."""
    S = batch.num_states
    s = batch.states[:, t]
    counts = np.bincount(s, minlength=S)
    total = np.bincount(s, weights=batch.ratios[:, t] * batch.rewards[:, t], minlength=S)
    out = np.full(S, np.nan)
    np.divide(total, counts, out=out, where=counts > 0)
    return out, counts > 0


@dataclass(frozen=True)
class RewardTables:
    """Cellwise reward means ``r(t, s, a)`` (NaN where unvisited) and counts."""

    mean: np.ndarray  # (H, S, A)
    counts: np.ndarray

    @property
    def defined(self) -> np.ndarray:
        return self.counts > 0

    def lookup(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Table values along logged (n, H) states and actions."""
        H = self.mean.shape[0]
        return self.mean[np.arange(H), states, actions]


def reward_table(batch: EpisodeBatch) -> RewardTables:
    """Sample mean of the reward for every visited (t, s, a) cell."""
    if not batch.finite_actions:
        raise ValueError("reward tables need finite actions")
    H, S, A = batch.horizon, batch.num_states, batch.num_actions
    cell = (np.arange(H) * S + batch.states[:, :H]) * A + batch.actions
    size = H * S * A
    counts = np.bincount(cell.ravel(), minlength=size)
    sums = np.bincount(cell.ravel(), weights=batch.rewards.ravel(), minlength=size)
    mean = np.full(size, np.nan)
    np.divide(sums, counts, out=mean, where=counts > 0)
    return RewardTables(mean.reshape(H, S, A), counts.reshape(H, S, A))


def simplex_project(vec) -> np.ndarray:
    """Rescale a nonnegative vector to sum to one."""
    v = np.asarray(vec, dtype=float)
    if np.any(v < 0):
        raise ValueError("simplex_project expects a nonnegative vector")
    total = v.sum()
    if total <= 0:
        raise DegenerateBatchError("cannot normalize an all-zero vector")
    return v / total


def marginal_l1_diagnostic(estimate, oracle) -> np.ndarray:
    """Per-step L1 distance between estimated and exact target marginals."""
    est = estimate.target if isinstance(estimate, MarginalEstimate) else np.asarray(estimate)
    orc = np.asarray(oracle)
    if est.shape != orc.shape:
        raise ValueError(f"shape mismatch: {est.shape} vs {orc.shape}")
    return np.abs(est - orc).sum(axis=1)


def marginal_weights(batch: EpisodeBatch, estimate: MarginalEstimate) -> np.ndarray:
    """Per-step weights of the marginalized estimator, shape (n, H).

    ``w_t(s_t) rho_t`` without a schedule; under a schedule, the ratio of the
    last observable step times the product of action ratios since then.
    """
    H = batch.horizon
    rho = batch.ratios
    if estimate.schedule is None:
        return estimate.weights[np.arange(H), batch.states[:, :H]] * rho
    anchor = estimate.schedule.anchor()
    anchor_w = estimate.weights[anchor, batch.states[:, anchor]]
    out = np.empty_like(rho)
    for c, end in zip(estimate.schedule.checkpoints,
                      np.append(estimate.schedule.checkpoints[1:], H)):
        out[:, c:end] = np.cumprod(rho[:, c:end], axis=1)
    return anchor_w * out
