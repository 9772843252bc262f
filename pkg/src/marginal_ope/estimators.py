"""Importance-sampling estimators built on one generic framework.

Every estimator here evaluates

    v = (1/n) sum_i g(s_1^i)
        + sum_i sum_t weight_{i,t} / phi_t * (reward_{i,t} + f_t(s_t^i, a_t^i, s_{t+1}^i))

for some choice of initial-value term ``g``, normalizer ``phi``, control
variate ``f``, reward source and weight source. Trajectory-wise estimators
(IS, WIS, DR, WDR) use cumulative ratios; marginalized ones (MIS, MDR) use
``w_t(s_t) rho_t`` with ``phi = n``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import exact
from .marginals import (
    MarginalEstimate,
    RewardTables,
    estimate_marginals,
    marginal_weights,
    reward_table,
)
from .mdp import EpisodeBatch, FinitePolicy, ObservationSchedule, TabularMdp


class InvalidSpecError(ValueError):
    """A framework spec is missing a dependency or names an unknown option."""


class SpectralFailureError(RuntimeError):
    """SSD-IS could not find a real eigenvector near eigenvalue 1."""


@dataclass(frozen=True)
class FrameworkSpec:
    """Switches of the generic estimator.

    g : "zero" or "value" (``V(s_1)`` from a :class:`QEstimate`)
    phi : "n" or "selfnorm" (batch sum of the step's weights)
    f : "zero" or "dr" (``-Q(s_t, a_t) + V(s_{t+1})``)
    reward : "raw" or "table" (cell means ``r(t, s, a)``)
    weight : "cumulative" (``rho_{0:t}``) or "marginalized" (``w_t(s_t) rho_t``)
    """

    g: str = "zero"
    phi: str = "n"
    f: str = "zero"
    reward: str = "raw"
    weight: str = "cumulative"

    def __post_init__(self):
        allowed = {"g": ("zero", "value"), "phi": ("n", "selfnorm"), "f": ("zero", "dr"),
                   "reward": ("raw", "table"), "weight": ("cumulative", "marginalized")}
        for name, options in allowed.items():
            if getattr(self, name) not in options:
                raise InvalidSpecError(f"{name} must be one of {options}")


IS_SPEC = FrameworkSpec()
WIS_SPEC = FrameworkSpec(phi="selfnorm")
DR_SPEC = FrameworkSpec(g="value", f="dr")
WDR_SPEC = FrameworkSpec(g="value", f="dr", phi="selfnorm")
MIS_SPEC = FrameworkSpec(weight="marginalized", reward="table")
MDR_SPEC = FrameworkSpec(weight="marginalized", reward="table", g="value", f="dr")


@dataclass(frozen=True)
class QEstimate:
    """Action values ``q[t, s, a]`` and state values ``v[t, s]`` (``v[H] = 0``)."""

    q: np.ndarray
    v: np.ndarray
    provenance: str = "model-based"

    @classmethod
    def zeros(cls, horizon: int, num_states: int, num_actions: int) -> "QEstimate":
        return cls(np.zeros((horizon, num_states, num_actions)),
                   np.zeros((horizon + 1, num_states)), "zero")

    @classmethod
    def from_exact(cls, ev: exact.ExactEvaluation) -> "QEstimate":
        return cls(ev.q_values, ev.values, "oracle")


@dataclass
class EstimatorOutput:
    estimate: float
    clipped: bool = False
    degenerate_steps: tuple = ()
    max_weight: float = float("nan")
    effective_sample_size: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)

    def __float__(self) -> float:
        return float(self.estimate)


def _ess(weights: np.ndarray) -> np.ndarray:
    s1 = weights.sum(axis=0)
    s2 = (weights**2).sum(axis=0)
    out = np.zeros_like(s1)
    np.divide(s1**2, s2, out=out, where=s2 > 0)
    return out


def _step_rewards(batch: EpisodeBatch, spec: FrameworkSpec, table: Optional[RewardTables],
                  schedule: Optional[ObservationSchedule]) -> np.ndarray:
    if spec.reward == "raw" or not batch.finite_actions:
        return batch.rewards
    if table is None:
        table = reward_table(batch)
    R = table.lookup(batch.states[:, :batch.horizon], batch.actions)
    if schedule is not None:
        # observations at hidden steps do not identify the reward cell
        R = np.where(schedule.observable, R, batch.rewards)
    return R


def framework_eval(batch: EpisodeBatch, spec: FrameworkSpec,
                   marginals: Optional[MarginalEstimate] = None,
                   q: Optional[QEstimate] = None,
                   table: Optional[RewardTables] = None,
                   g_batch: Optional[EpisodeBatch] = None) -> EstimatorOutput:
    """Evaluate the generic estimator for ``spec`` on ``batch``.

    ``g_batch`` overrides the episodes whose initial states feed the ``g``
    term (MDR averages ``V(s_1)`` over the full batch while weighting half).
    """
    n, H = batch.n, batch.horizon
    if spec.weight == "marginalized":
        if marginals is None:
            raise InvalidSpecError("marginalized weights need a MarginalEstimate")
        W = marginal_weights(batch, marginals)
        schedule = marginals.schedule
    else:
        W = batch.cumulative_ratios()
        schedule = None
    if (spec.g == "value" or spec.f == "dr") and q is None:
        raise InvalidSpecError("g='value' and f='dr' need a QEstimate")

    degenerate = list(marginals.degenerate_steps) if marginals is not None else []
    if spec.phi == "n":
        phi = np.full(H, float(n))
    else:
        phi = W.sum(axis=0)
        zero = phi <= 0
        if np.any(zero):
            degenerate.extend(int(t) + 1 for t in np.flatnonzero(zero))
            W = np.where(zero, 0.0, W)
            phi = np.where(zero, 1.0, phi)

    R = _step_rewards(batch, spec, table, schedule)
    if spec.f == "dr":
        steps = np.arange(H)
        F = -q.q[steps, batch.states[:, :H], batch.actions] + q.v[steps + 1, batch.states[:, 1:]]
        R = R + F
    total = np.sum(W / phi * R)
    if spec.g == "value":
        g_src = batch if g_batch is None else g_batch
        total = np.mean(q.v[0, g_src.states[:, 0]]) + total
    if not np.isfinite(total):
        raise FloatingPointError("estimator produced a non-finite value")
    return EstimatorOutput(float(total), degenerate_steps=tuple(sorted(set(degenerate))),
                           max_weight=float(W.max()), effective_sample_size=_ess(W))


def naive_is(batch: EpisodeBatch) -> EstimatorOutput:
    """Per-decision importance sampling, ``(1/n) sum_i sum_h rho_{0:h} r_h``."""
    return framework_eval(batch, IS_SPEC)


def wis(batch: EpisodeBatch) -> EstimatorOutput:
    """Step-wise weighted importance sampling."""
    return framework_eval(batch, WIS_SPEC)


def dr(batch: EpisodeBatch, q: QEstimate) -> EstimatorOutput:
    return framework_eval(batch, DR_SPEC, q=q)


def wdr(batch: EpisodeBatch, q: QEstimate) -> EstimatorOutput:
    return framework_eval(batch, WDR_SPEC, q=q)


def mis(batch: EpisodeBatch, selfnorm: bool = True, reward_table: bool = True,
        schedule: Optional[ObservationSchedule] = None,
        marginals: Optional[MarginalEstimate] = None) -> EstimatorOutput:
    """Marginalized importance sampling.

    Parameters
    ----------
    selfnorm : bool
        Normalize each step's target-marginal estimate onto the simplex.
    reward_table : bool
        Replace logged rewards by cell means ``r(t, s, a)``; ignored for
        continuous actions.
    schedule : ObservationSchedule, optional
        Estimate marginals at observable steps only and bridge hidden gaps
        with products of action ratios.
    marginals : MarginalEstimate, optional
        Precomputed (e.g. exact) marginals; overrides ``selfnorm``/``schedule``.
    """
    if marginals is None:
        marginals = estimate_marginals(batch, selfnorm=selfnorm, schedule=schedule)
    spec = FrameworkSpec(weight="marginalized", reward="table" if reward_table else "raw")
    out = framework_eval(batch, spec, marginals=marginals)
    out.extras["marginals"] = marginals
    return out


def _fit_counts(batch: EpisodeBatch):
    H, S, A = batch.horizon, batch.num_states, batch.num_actions
    s, a, s2 = batch.states[:, :H], batch.actions, batch.states[:, 1:]
    cell = ((np.arange(H) * S + s) * A + a) * S + s2
    size = H * S * A * S
    counts = np.bincount(cell.ravel(), minlength=size).reshape(H, S, A, S)
    sums = np.bincount(cell.ravel(), weights=batch.rewards.ravel(), minlength=size)
    return counts, sums.reshape(H, S, A, S)


def fit_model(batch: EpisodeBatch) -> TabularMdp:
    """Count-based MDP fit on the observed state space.

    Unvisited ``(t, s, a)`` cells become zero-reward self-loops.
    """
    if not batch.finite_actions:
        raise ValueError("model fitting needs finite actions")
    H, S, A = batch.horizon, batch.num_states, batch.num_actions
    counts, sums = _fit_counts(batch)
    visits = counts.sum(axis=-1, keepdims=True)
    T = np.zeros(counts.shape)
    np.divide(counts, visits, out=T, where=visits > 0)
    unvisited = visits[..., 0] == 0
    t_idx, s_idx, a_idx = np.nonzero(unvisited)
    T[t_idx, s_idx, a_idx, s_idx] = 1.0
    r = np.zeros(counts.shape)
    np.divide(sums, counts, out=r, where=counts > 0)
    d1 = np.bincount(batch.states[:, 0], minlength=S) / batch.n
    r_min = min(0.0, float(r.min()))
    r_max = max(1.0, float(r.max()))
    return TabularMdp(d1, T, r, r_max=r_max, r_min=r_min)


def fit_q_model(batch: EpisodeBatch, target: FinitePolicy) -> QEstimate:
    """Fit a count-based model and solve it exactly under ``target``."""
    ev = exact.exact_values(fit_model(batch), target)
    return QEstimate(ev.q_values, ev.values, "model-based")


def dm(batch: EpisodeBatch, target: FinitePolicy) -> EstimatorOutput:
    """Direct method: value of ``target`` on the fitted model."""
    model = fit_model(batch)
    ev = exact.exact_values(model, target)
    return EstimatorOutput(ev.value, extras={"model": model})


def mdr(batch: EpisodeBatch, target: Optional[FinitePolicy] = None, split_seed: int = 0,
        q: Optional[QEstimate] = None, selfnorm: bool = True, reward_table: bool = True,
        schedule: Optional[ObservationSchedule] = None) -> EstimatorOutput:
    """Marginalized doubly robust estimator with a two-way episode split.

    After a seeded shuffle, half A estimates the marginal ratios and carries
    the weighted terms; half B fits the Q model. ``g`` averages ``V(s_1)``
    over the whole batch. Passing ``q`` skips the fit.
    """
    if batch.n < 2:
        raise ValueError("MDR needs at least two episodes")
    perm = np.random.default_rng(split_seed).permutation(batch.n)
    half_a, half_b = batch.subset(np.sort(perm[: batch.n // 2])), batch.subset(np.sort(perm[batch.n // 2:]))
    if q is None:
        if target is None:
            raise InvalidSpecError("MDR needs a target policy or a QEstimate")
        q = fit_q_model(half_b, target)
    marginals = estimate_marginals(half_a, selfnorm=selfnorm, schedule=schedule)
    spec = FrameworkSpec(weight="marginalized", reward="table" if reward_table else "raw",
                         g="value", f="dr")
    out = framework_eval(half_a, spec, marginals=marginals, q=q, g_batch=batch)
    out.extras.update(split=(len(half_a.states), len(half_b.states)), q=q)
    return out


def ssd_ratio(batch: EpisodeBatch) -> tuple[np.ndarray, np.ndarray, float]:
    """Spectral estimate of the stationary ratio ``d_inf^pi / dbar^mu``.

    Returns the ratio per state, the averaged behavior marginal over steps
    ``1..H-1``, and the selected eigenvalue.
    """
    H, S, n = batch.horizon, batch.num_states, batch.n
    if H < 2:
        raise ValueError("SSD-IS needs H >= 2")
    s, s2 = batch.states[:, : H - 1], batch.states[:, 1:H]
    rho = batch.ratios[:, : H - 1]
    scale = n * (H - 1)
    A_hat = np.bincount((s2 * S + s).ravel(), weights=rho.ravel(),
                        minlength=S * S).reshape(S, S) / scale
    d_mu = np.bincount(s.ravel(), minlength=S) / scale
    seen = np.flatnonzero(d_mu > 0)
    M = A_hat[np.ix_(seen, seen)] / d_mu[seen][:, None]
    try:
        lam, vec = exact.leading_eigenvector(M, 1.0)
    except exact.SpectralAmbiguityError as exc:
        raise SpectralFailureError(str(exc)) from None
    norm = d_mu[seen] @ vec
    if not np.isfinite(norm) or abs(norm) < 1e-300:
        raise SpectralFailureError("eigenvector has zero mass under the behavior marginal")
    ratio = np.zeros(S)
    ratio[seen] = vec / norm
    return ratio, d_mu, lam


def ssd_is(batch: EpisodeBatch) -> EstimatorOutput:
    """Importance sampling with stationary-distribution ratios.

    ``v = (1/n) sum_i sum_t ratio(s_t) rho_t r_t`` with time-independent ratios.
    """
    ratio, d_mu, lam = ssd_ratio(batch)
    H = batch.horizon
    W = ratio[batch.states[:, :H]] * batch.ratios
    v = float(np.sum(W * batch.rewards) / batch.n)
    return EstimatorOutput(v, max_weight=float(W.max()), effective_sample_size=_ess(W),
                           extras={"ratio": ratio, "eigenvalue": lam,
                                   "normalization": float(d_mu @ ratio)})


def value_range(model) -> tuple[float, float]:
    """Feasible value interval ``[H r_min, H r_max]`` (``r_min = 0`` gives ``[0, H R_max]``)."""
    lo, hi = model.reward_bounds
    return model.horizon * lo, model.horizon * hi


def clip_estimate(v: float, model) -> float:
    """Project an estimate onto the feasible value range of ``model``.

    ``model`` is anything with ``horizon`` and ``reward_bounds``.
    """
    lo, hi = value_range(model)
    return float(min(max(v, lo), hi))


def clip_output(out: EstimatorOutput, model) -> EstimatorOutput:
    v = clip_estimate(out.estimate, model)
    return EstimatorOutput(v, True, out.degenerate_steps, out.max_weight,
                           out.effective_sample_size, dict(out.extras, unclipped=out.estimate))
