"""Off-policy evaluation for finite-state episodic MDPs.

Marginalized importance sampling and the usual baselines (IS, WIS, DR, WDR,
DM, MDR, SSD-IS), exact dynamic-programming oracles, the benchmark domains,
and a replication harness for relative-RMSE experiments.
"""
from .mdp import (
    DensityPolicyPair,
    Episode,
    EpisodeBatch,
    FinitePolicy,
    ObservationSchedule,
    TabularMdp,
    cumulative_ratios,
    load_mdp,
    mdp_from_json,
    sample_batch,
    sample_episode,
)
from .exact import (
    cr_lower_bound,
    exact_marginals,
    exact_values,
    mis_mse_bound,
    mis_mse_leading_term,
    stationary_ratio_oracle,
)
from .marginals import (
    MarginalEstimate,
    behavior_marginals,
    estimate_marginals,
    marginal_l1_diagnostic,
    reward_is,
    reward_table,
    simplex_project,
    target_marginals_raw,
    target_marginals_selfnorm,
    transition_is,
)
from .estimators import (
    EstimatorOutput,
    FrameworkSpec,
    QEstimate,
    clip_estimate,
    dm,
    dr,
    fit_q_model,
    framework_eval,
    mdr,
    mis,
    naive_is,
    ssd_is,
    wdr,
    wis,
)

__version__ = "0.1.0"
