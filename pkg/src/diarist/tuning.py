"""Seeded random search over the clustering hyperparameters.

The search space is two-dimensional (clustering threshold, minimum cluster
size), where uniform random sampling with a few hundred trials is
statistically adequate; the ``evaluate`` callable owns everything else, so
other strategies can be swapped in behind the same interface.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class SearchSpace:
    threshold_bounds: tuple[float, float] = (0.0, 2.0)
    min_cluster_size_bounds: tuple[int, int] = (1, 30)

    def __post_init__(self):
        lo, hi = self.threshold_bounds
        if not 0.0 <= lo < hi <= 2.0:
            raise ValueError("threshold bounds must satisfy 0 <= lo < hi <= 2")
        lo, hi = self.min_cluster_size_bounds
        if not 1 <= lo <= hi:
            raise ValueError("min_cluster_size bounds must satisfy 1 <= lo <= hi")


@dataclass(frozen=True)
class Trial:
    index: int
    params: dict
    objective: float | None
    status: str  # "ok" | "failed"
    seed: int


def tune(
    evaluate: Callable[[dict], float],
    space: SearchSpace | None = None,
    budget: int = 300,
    seed: int = 0,
) -> tuple[dict, list[Trial]]:
    """Minimize ``evaluate`` over the space with seeded random search.

    All sample points are drawn up-front from the seed, so the trial sequence
    is reproducible and independent of evaluation order.  Failing trials are
    logged and skipped; if every trial fails, a RuntimeError is raised.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    space = space or SearchSpace()
    rng = np.random.default_rng(seed)
    thr_lo, thr_hi = space.threshold_bounds
    size_lo, size_hi = space.min_cluster_size_bounds
    samples = [
        {
            "clustering_threshold": float(rng.uniform(thr_lo, thr_hi)),
            "min_cluster_size": int(rng.integers(size_lo, size_hi + 1)),
        }
        for _ in range(budget)
    ]
    trials = []
    for index, params in enumerate(samples):
        try:
            objective = float(evaluate(params))
            if not math.isfinite(objective):
                raise ValueError(f"objective is not finite: {objective}")
            trials.append(Trial(index, params, objective, "ok", seed))
        except Exception:
            trials.append(Trial(index, params, None, "failed", seed))
    succeeded = [t for t in trials if t.status == "ok"]
    if not succeeded:
        raise RuntimeError("every tuning trial failed")
    best = min(succeeded, key=lambda t: t.objective)
    return dict(best.params), trials


def save_trials_csv(path: str | Path, trials: list[Trial]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "threshold", "min_cluster_size", "der", "status"])
        for t in trials:
            der = "" if t.objective is None else f"{t.objective:.6f}"
            writer.writerow(
                [t.index, f"{t.params['clustering_threshold']:.6f}", t.params["min_cluster_size"], der, t.status]
            )
