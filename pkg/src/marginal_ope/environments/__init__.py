"""Benchmark domains with policy pairs and ground-truth values."""
from .bundle import BenchmarkBundle
from .chain import TimeVaryingChain, chain_closed_form, reduced_chain_mdp, time_varying_chain
from .mountain_car import (
    Discretizer,
    MountainCar,
    QLearningConfig,
    TrainingError,
    greedy_success_rate,
    mountain_car,
    q_learning,
    softmax_policy,
)
from .toy import (
    ObservedMdp,
    model_fail,
    model_fail_closed_form,
    model_fail_mdp,
    model_win,
    model_win_closed_form,
    model_win_mdp,
)

ENVIRONMENTS = {
    "model-win": model_win,
    "model-fail": model_fail,
    "time-varying-chain": time_varying_chain,
    "mountain-car": mountain_car,
}


def make_environment(env_id: str, **params) -> BenchmarkBundle:
    """Build a bundle from its config id; ``H`` is accepted as an alias of ``horizon``."""
    try:
        factory = ENVIRONMENTS[env_id]
    except KeyError:
        raise KeyError(f"unknown environment {env_id!r}; known: {sorted(ENVIRONMENTS)}") from None
    if "H" in params:
        params["horizon"] = params.pop("H")
    return factory(**params)
