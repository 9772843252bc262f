"""Exact dynamic-programming oracles and MSE diagnostics for tabular MDPs."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .mdp import FinitePolicy, TabularMdp


class CoverageError(ValueError):
    """The behavior policy never reaches a state the target policy visits."""


class SpectralAmbiguityError(ValueError):
    """The leading eigenvector is not unique (several closed classes)."""


@dataclass(frozen=True)
class ExactEvaluation:
    """Ground-truth quantities of a policy on a tabular MDP.

    Arrays are zero-indexed by step: ``marginals[t]`` is ``d_{t+1}``,
    ``values`` has ``H + 1`` rows with ``values[H] == 0``.
    """

    marginals: np.ndarray  # (H, S)
    values: np.ndarray  # (H + 1, S)
    q_values: np.ndarray  # (H, S, A)
    step_rewards: np.ndarray  # (H, S), r_t^pi(s)
    value: float


def _policy_tensor(policy: FinitePolicy, mdp: TabularMdp) -> np.ndarray:
    if policy.num_states != mdp.num_states or policy.num_actions != mdp.num_actions:
        raise ValueError("policy table does not match the MDP's state/action sizes")
    return policy.as_tensor(mdp.horizon)


def state_transition_matrices(mdp: TabularMdp, policy: FinitePolicy) -> np.ndarray:
    """``P[t, s, s'] = sum_a pi(a|s) T_t(s'|s, a)``."""
    pi = _policy_tensor(policy, mdp)
    return np.einsum("tsa,tsan->tsn", pi, mdp.transitions)


def exact_marginals(mdp: TabularMdp, policy: FinitePolicy) -> np.ndarray:
    """State distributions ``d_1..d_H`` under ``policy``, shape (H, S)."""
    P = state_transition_matrices(mdp, policy)
    d = np.empty((mdp.horizon, mdp.num_states))
    d[0] = mdp.initial_dist
    for t in range(mdp.horizon - 1):
        d[t + 1] = d[t] @ P[t]
    return d


def exact_values(mdp: TabularMdp, policy: FinitePolicy) -> ExactEvaluation:
    """Backward Bellman recursion with ``V_{H+1} = 0``."""
    pi = _policy_tensor(policy, mdp)
    H, S, A = mdp.horizon, mdp.num_states, mdp.num_actions
    rbar = mdp.expected_reward()
    V = np.zeros((H + 1, S))
    Q = np.empty((H, S, A))
    for t in range(H - 1, -1, -1):
        Q[t] = rbar[t] + mdp.transitions[t] @ V[t + 1]
        V[t] = np.einsum("sa,sa->s", pi[t], Q[t])
    d = exact_marginals(mdp, policy)
    step_rewards = np.einsum("tsa,tsa->ts", pi, rbar)
    return ExactEvaluation(d, V, Q, step_rewards, float(mdp.initial_dist @ V[0]))


def policy_value(mdp: TabularMdp, policy: FinitePolicy) -> float:
    return exact_values(mdp, policy).value


def _density_ratio(d_pi: np.ndarray, d_mu: np.ndarray) -> np.ndarray:
    """``d_pi^2 / d_mu`` with 0 where ``d_pi = 0``; raises on missing coverage."""
    if np.any((d_mu <= 0) & (d_pi > 0)):
        t, s = np.argwhere((d_mu <= 0) & (d_pi > 0))[0]
        raise CoverageError(f"d_mu is zero at step {t + 1}, state {s} where d_pi > 0")
    out = np.zeros_like(d_pi)
    np.divide(d_pi**2, d_mu, out=out, where=d_pi > 0)
    return out


def _moments(mdp, target, behavior):
    """Shared pieces of the MSE expressions.

    Returns the d_pi^2/d_mu weights (H, S), the value table, the per-(s,a)
    conditional first and second moments of ``V_{t+1}(s') + r_t``.
    """
    ev = exact_values(mdp, target)
    d_mu = exact_marginals(mdp, behavior)
    weight = _density_ratio(ev.marginals, d_mu)
    V_next = ev.values[1:]  # (H, S')
    X = mdp.reward_mean + V_next[:, None, None, :]
    m1 = np.einsum("tsan,tsan->tsa", mdp.transitions, X)
    m2 = np.einsum("tsan,tsan->tsa", mdp.transitions, X**2) + mdp.noise_variance
    return ev, weight, m1, m2


def _initial_term(mdp: TabularMdp, ev: ExactEvaluation) -> float:
    d1, V1 = mdp.initial_dist, ev.values[0]
    return float(d1 @ V1**2 - (d1 @ V1) ** 2)


def mis_mse_leading_term(mdp: TabularMdp, target: FinitePolicy, behavior: FinitePolicy,
                         n: int) -> float:
    """Leading MSE term of the clipped MIS estimator.

    ``(1/n) sum_h sum_s d_h^pi(s)^2 / d_h^mu(s) Var_mu[rho (V_{h+1}(s') + r_h) | s]``
    plus the initial-state term ``Var_{d_1}[V_1]`` (the ``h = 0`` boundary).
    """
    ev, weight, m1, m2 = _moments(mdp, target, behavior)
    pi = _policy_tensor(target, mdp)
    mu = _policy_tensor(behavior, mdp)
    with np.errstate(divide="ignore", invalid="ignore"):
        rho_sq_mu = np.where(mu > 0, pi**2 / mu, 0.0)
    second = np.einsum("tsa,tsa->ts", rho_sq_mu, m2)
    cond_var = np.maximum(second - ev.values[:-1] ** 2, 0.0)
    return (_initial_term(mdp, ev) + float(np.sum(weight * cond_var))) / n


def cr_lower_bound(mdp: TabularMdp, target: FinitePolicy, behavior: FinitePolicy,
                   n: int) -> float:
    """Cramer-Rao style lower bound ``(1/n) sum d^2/d_mu sum_a pi^2/mu Var[V' + r | s, a]``."""
    ev, weight, m1, m2 = _moments(mdp, target, behavior)
    pi = _policy_tensor(target, mdp)
    mu = _policy_tensor(behavior, mdp)
    with np.errstate(divide="ignore", invalid="ignore"):
        rho_sq_mu = np.where(mu > 0, pi**2 / mu, 0.0)
    cond_var = np.maximum(m2 - m1**2, 0.0)
    inner = np.einsum("tsa,tsa->ts", rho_sq_mu, cond_var)
    return float(np.sum(weight * inner)) / n


@dataclass(frozen=True)
class MseBoundTerms:
    leading: float
    multiplicative_factor: float
    additive: float
    n_threshold: float
    tau_a: float
    tau_s: float
    min_d_mu: float

    @property
    def bound(self) -> float:
        return self.leading * self.multiplicative_factor + self.additive


def mis_mse_bound(mdp: TabularMdp, target: FinitePolicy, behavior: FinitePolicy,
                  n: int) -> MseBoundTerms:
    """Full finite-sample bound: leading term, ``1 + sqrt(16 log n / (n min d_mu))``
    factor, and the ``19 tau_a^2 tau_s^2 S H^2 (sigma^2 + R^2 + V^2) / n^2`` term.

    Minima over ``d_mu`` are taken over states reachable under ``mu``.
    """
    ev = exact_values(mdp, target)
    d_pi = ev.marginals
    d_mu = exact_marginals(mdp, behavior)
    pi = _policy_tensor(target, mdp)
    mu = _policy_tensor(behavior, mdp)
    reach = d_mu > 0
    # only (t, s) pairs the behavior policy can reach enter the maxima
    act_ratio = np.where(mu > 0, pi / np.where(mu > 0, mu, 1.0), 0.0)
    tau_a = float(np.max(np.where(reach[..., None], act_ratio, 0.0)))
    tau_s = float(np.max(np.where(reach, d_pi / np.where(reach, d_mu, 1.0), 0.0)))
    min_d_mu = float(d_mu[reach].min())
    r_abs = max(abs(mdp.r_min), abs(mdp.r_max))
    v_max = mdp.horizon * r_abs
    H, S = mdp.horizon, mdp.num_states
    leading = mis_mse_leading_term(mdp, target, behavior, n)
    factor = 1.0 + math.sqrt(16.0 * math.log(n) / (n * min_d_mu))
    additive = 19.0 * tau_a**2 * tau_s**2 * S * H**2 * (
        mdp.noise_variance + r_abs**2 + v_max**2) / n**2
    mx = np.maximum(d_pi, d_mu)
    min_mx = float(mx[mx > 0].min())
    threshold = max(16.0 * math.log(n) / min_d_mu, 4.0 * H * tau_a * tau_s / min_mx)
    return MseBoundTerms(leading, factor, additive, threshold, tau_a, tau_s, min_d_mu)


def leading_eigenvector(M: np.ndarray, target: float = 1.0, tol: float = 1e-9,
                        power_iters: int = 100) -> tuple[float, np.ndarray]:
    """Right eigenvector of ``M`` whose eigenvalue is closest to ``target``.

    A dense eigensolve picks the eigenvalue by ``|lambda - target|``; when
    that eigenvalue is also dominant in modulus the vector is polished by
    power iteration. Raises :class:`SpectralAmbiguityError` when two
    eigenvalues are equally close or the selected one is complex.
    """
    vals, vecs = scipy.linalg.eig(M)
    dist = np.abs(vals - target)
    order = np.argsort(dist)
    if len(vals) > 1 and dist[order[1]] - dist[order[0]] < tol:
        raise SpectralAmbiguityError(
            f"eigenvalues {vals[order[0]]:.6g} and {vals[order[1]]:.6g} are equally close to {target}")
    lam = vals[order[0]]
    vec = vecs[:, order[0]]
    if abs(lam.imag) > 1e-9:
        raise SpectralAmbiguityError(f"eigenvalue closest to {target} is complex: {lam}")
    # refine with power iteration when the selected eigenvalue is dominant
    if abs(lam) >= np.max(np.abs(vals)) - tol and abs(lam) > 0:
        x = np.real(vec)
        for _ in range(power_iters):
            y = M @ x / lam.real
            if np.linalg.norm(y - x, np.inf) < 1e-15 * max(1.0, np.linalg.norm(x, np.inf)):
                x = y
                break
            x = y
        vec = x
    return float(lam.real), np.real(vec)


def stationary_distribution(P: np.ndarray) -> np.ndarray:
    """Stationary row vector of a row-stochastic matrix ``P[s, s']``."""
    _, v = leading_eigenvector(P.T, 1.0)
    v = v / v.sum()
    return np.where(np.abs(v) < 1e-15, 0.0, v)


def stationary_ratio_oracle(mdp: TabularMdp, target: FinitePolicy, behavior: FinitePolicy,
                            horizon: int | None = None) -> np.ndarray:
    """Exact ``d_inf^pi(s) / dbar^mu_{1:H-1}(s)`` for a time-invariant MDP.

    States never visited under ``mu`` in the first ``H - 1`` steps get ratio 0.
    """
    if not mdp.is_stationary:
        raise ValueError("stationary_ratio_oracle needs time-invariant transitions")
    H = mdp.horizon if horizon is None else horizon
    T = mdp.transitions[0]
    P_pi = np.einsum("sa,san->sn", target.probs(0), T)
    P_mu = np.einsum("sa,san->sn", behavior.probs(0), T)
    d_inf = stationary_distribution(P_pi)
    d = mdp.initial_dist.copy()
    total = np.zeros_like(d)
    for _ in range(H - 1):
        total += d
        d = d @ P_mu
    dbar = total / (H - 1)
    out = np.zeros_like(dbar)
    np.divide(d_inf, dbar, out=out, where=dbar > 0)
    return out
