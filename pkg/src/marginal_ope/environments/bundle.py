from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from ..mdp import EpisodeBatch, ObservationSchedule, TabularMdp, sample_batch


@dataclass(frozen=True)
class BenchmarkBundle:
    """An environment, its policy pair, and the ground-truth value of the target.

    ``behavior`` and ``target`` act on the observed state ids recorded in
    batches. When the environment has an exact tabular form, ``mdp`` holds it
    together with ``mdp_behavior``/``mdp_target`` defined on its true states.
    """

    name: str
    dynamics: Any
    behavior: Any
    target: Any
    oracle_value: float
    oracle_provenance: str  # "exact-dp" | "closed-form" | "monte-carlo"
    reward_bounds: tuple[float, float]
    oracle_se: float = 0.0
    schedule: Optional[ObservationSchedule] = None
    ratio_bound: float = np.inf
    mdp: Optional[TabularMdp] = None
    mdp_behavior: Any = None
    mdp_target: Any = None
    params: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict, repr=False)

    @property
    def horizon(self) -> int:
        return self.dynamics.horizon

    @property
    def num_states(self) -> int:
        return self.dynamics.num_states

    @property
    def finite_actions(self) -> bool:
        return getattr(self.behavior, "num_actions", None) is not None

    def sample(self, n: int, seed: int) -> EpisodeBatch:
        return sample_batch(self.dynamics, self.behavior, self.target, n, seed,
                            ratio_bound=self.ratio_bound,
                            metadata={"env": self.name, **self.params})

    def oracle(self) -> dict:
        return {"env": self.name, "value": self.oracle_value,
                "provenance": self.oracle_provenance, "se": self.oracle_se,
                "params": dict(self.params)}
