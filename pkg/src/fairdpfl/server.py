"""Server side: client sampling, FedAvg, statistics completion and disparity views."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fairness import GroupCounts, ProbabilityTable, dpl_from_counts
from .linmodel import LinearModel


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class RoundReport:
    round: int
    accuracy: float
    global_disparity: float | None
    local_disparities: list
    lambda_mean: float
    eps_spent: float | None
    train_accuracy: float | None = None
    train_global_disparity: float | None = None
    clients: list | None = None
    p_table: list | None = None

    def to_json(self) -> dict:
        return {
            "round": self.round,
            "accuracy": self.accuracy,
            "global_disparity": self.global_disparity,
            "local_disparities": list(self.local_disparities),
            "lambda_mean": self.lambda_mean,
            "eps_spent": self.eps_spent,
            "train_accuracy": self.train_accuracy,
            "train_global_disparity": self.train_global_disparity,
            "clients": self.clients,
            "p_table": self.p_table,
        }


def sample_clients(all_clients, fraction: float, rng: np.random.Generator) -> list:
    """Uniform sample without replacement of ``round(fraction * K)`` clients (at least one)."""
    if not 0 < fraction <= 1:
        raise ValueError("client fraction must be in (0, 1]")
    clients = list(all_clients)
    k = max(1, int(round(fraction * len(clients))))
    if k >= len(clients):
        return clients
    idx = np.sort(rng.choice(len(clients), size=k, replace=False))
    return [clients[i] for i in idx]


def fedavg(models, weights) -> LinearModel:
    models = list(models)
    weights = np.asarray(list(weights), dtype=np.float64)
    if not models:
        raise AggregationError("nothing to aggregate")
    if len(weights) != len(models) or np.any(weights <= 0):
        raise AggregationError("need one positive weight per model")
    shape = models[0].weights.shape
    if any(m.weights.shape != shape for m in models):
        raise AggregationError("model shapes differ")
    if all(np.array_equal(m.weights, models[0].weights) for m in models):
        return LinearModel(models[0].weights)
    frac = weights / weights.sum()
    stacked = np.stack([m.weights for m in models])
    return LinearModel(np.tensordot(frac, stacked, axes=1))


def complete_statistics(shared: GroupCounts, totals) -> GroupCounts:
    """Fill unshared (NaN) entries from the group totals.

    Each row's missing entries split ``N(z) - sum(shared)`` evenly; a negative
    remainder (possible under noise) is clamped to zero.
    """
    totals = np.asarray(totals, dtype=np.float64)
    counts = shared.counts.copy()
    for z in range(counts.shape[0]):
        missing = ~np.isfinite(counts[z])
        if not missing.any():
            continue
        rest = totals[z] - counts[z, ~missing].sum()
        counts[z, missing] = max(0.0, rest) / missing.sum()
    return GroupCounts(counts, totals)


def aggregate_and_table(completed) -> tuple[GroupCounts, ProbabilityTable]:
    """Pool client counts and derive ``P(Yhat=y | Z=z)`` per group.

    Rows whose pooled total is not positive are NaN (no information).
    """
    completed = list(completed)
    if not completed:
        raise AggregationError("no statistics to aggregate")
    pooled = GroupCounts(
        sum(c.counts for c in completed),
        sum(np.nan_to_num(c.group_totals) for c in completed),
    )
    clamped = np.clip(pooled.counts, 0.0, None)
    sizes = clamped.sum(axis=1)
    p = np.full(clamped.shape, np.nan)
    ok = sizes > 0
    p[ok] = clamped[ok] / sizes[ok, None]
    return pooled, ProbabilityTable(p, weights=np.where(ok, sizes, 0.0))


def global_disparity(pooled: GroupCounts) -> float | None:
    """DPL of the pooled counts; None when fewer than two groups are populated."""
    counts = np.clip(np.nan_to_num(pooled.counts), 0.0, None)
    present = counts.sum(axis=1) > 0
    if np.count_nonzero(present) < 2:
        return None
    # groups absent from every client are left out of the max
    sub = GroupCounts(counts[present], counts[present].sum(axis=1))
    return dpl_from_counts(sub)[0]


def local_disparity_summary(values) -> tuple[float, list]:
    values = [float(v) for v in values]
    if not values:
        raise ValueError("need at least one client disparity")
    return float(np.mean(values)), sorted(values)


def weighted_mean(values, weights) -> float:
    weights = np.asarray(list(weights), dtype=np.float64)
    values = np.asarray(list(values), dtype=np.float64)
    return float(np.dot(weights / weights.sum(), values))
