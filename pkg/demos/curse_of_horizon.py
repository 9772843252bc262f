"""Time-varying chain: IS error explodes with the horizon, MIS error does not.

The agent sits in a start state and leaves it with a small per-step probability
under the behavior policy and a much larger one under the target policy. Each
extra step multiplies another ratio into the IS weight. MIS only needs the
ratio of state marginals, which stays bounded. SSD-IS assumes a stationary
distribution that this chain never reaches, so its error plateaus instead of
shrinking.

Run with ``python3 demos/curse_of_horizon.py``.
"""
import numpy as np

from marginal_ope.environments import time_varying_chain
from marginal_ope.estimators import mis, naive_is, ssd_is

N, REPS = 1024, 32


def rel_rmse(values, truth):
    return float(np.sqrt(np.mean((np.asarray(values) - truth) ** 2)) / abs(truth))


def main():
    print(f"{'H':>4} {'truth':>8} {'IS':>8} {'MIS':>8} {'SSD-IS':>8}   (relative RMSE, n={N})")
    for H in (8, 16, 32, 64):
        bundle = time_varying_chain(H)
        runs = {"is": [], "mis": [], "ssd": []}
        for rep in range(REPS):
            batch = bundle.sample(N, 97 * H + rep)
            runs["is"].append(naive_is(batch).estimate)
            runs["mis"].append(mis(batch).estimate)
            runs["ssd"].append(ssd_is(batch).estimate)
        truth = bundle.oracle_value
        row = " ".join(f"{rel_rmse(runs[k], truth):>8.3f}" for k in ("is", "mis", "ssd"))
        print(f"{H:>4} {truth:>8.3f} {row}")


if __name__ == "__main__":
    main()
