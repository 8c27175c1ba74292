"""Demographic disparity, the DPL regularizer and the tunable-lambda controller.

Disparity of class ``y`` for group ``z`` is ``P(Yhat=y | Z=z) - P(Yhat=y | Z!=z)``;
the DPL is its maximum over all ``(y, z)``. The complement probability pools
every other group present in the data. When a group (or its whole
complement) is absent, the probability is taken from a server-provided
:class:`ProbabilityTable`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from .linmodel import Dataset, LinearModel, forward, per_sample_prob_grads, predict


class MissingGroupError(ValueError):
    """A group probability is needed but neither data nor a fallback provide it."""

    def __init__(self, group: int, side: str = "group"):
        self.group = group
        self.side = side
        super().__init__(f"no data and no fallback probability for {side} of sensitive value {group}")


@dataclass(frozen=True)
class GroupCounts:
    """Prediction counts per (sensitive value, predicted class).

    ``counts[z, y]`` may be real-valued when noise has been added, and NaN
    for entries a client did not share.
    """

    counts: np.ndarray  # (|Z|, C)
    group_totals: np.ndarray  # (|Z|,)

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.float64)
        totals = np.array(self.group_totals, dtype=np.float64).reshape(-1)
        if counts.ndim != 2 or counts.shape[0] != totals.shape[0]:
            raise ValueError(f"counts {counts.shape} and totals {totals.shape} disagree")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "group_totals", totals)

    @property
    def n_groups(self) -> int:
        return self.counts.shape[0]

    @property
    def n_classes(self) -> int:
        return self.counts.shape[1]

    def __add__(self, other: "GroupCounts") -> "GroupCounts":
        return GroupCounts(self.counts + other.counts, self.group_totals + other.group_totals)


@dataclass(frozen=True)
class ProbabilityTable:
    """``p[z, y] = P(Yhat=y | Z=z)``; a NaN row marks a group with no information.

    ``weights`` are the pooled group sizes, used to mix rows when a whole
    complement has to be reconstructed from the table.
    """

    p: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        p = np.array(self.p, dtype=np.float64)
        object.__setattr__(self, "p", p)
        if self.weights is not None:
            object.__setattr__(self, "weights", np.array(self.weights, dtype=np.float64))

    def available(self, z: int) -> bool:
        return bool(np.all(np.isfinite(self.p[z])))

    def row(self, z: int) -> np.ndarray:
        return self.p[z]

    def to_json(self) -> list:
        return [[None if not np.isfinite(v) else float(v) for v in row] for row in self.p]


@dataclass(frozen=True)
class FairnessController:
    lam: float = 0.0
    velocity: float = 0.0
    momentum: float = 0.0
    rho: float = 0.1
    target: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if self.momentum < 0:
            raise ValueError("momentum must be >= 0")
        if self.rho <= 0:
            raise ValueError("rho must be > 0")


def group_counts(y_pred, z, n_groups: int, n_classes: int) -> GroupCounts:
    y_pred = np.asarray(y_pred, dtype=np.int64)
    z = np.asarray(z, dtype=np.int64)
    counts = np.zeros((n_groups, n_classes))
    np.add.at(counts, (z, y_pred), 1.0)
    totals = np.bincount(z, minlength=n_groups).astype(np.float64)
    return GroupCounts(counts, totals)


def _as_exact(a: np.ndarray):
    """Lift integral arrays to Fractions so ties and antisymmetry are exact."""
    if np.all(np.isfinite(a)) and np.all(a == np.round(a)):
        return [[Fraction(int(v)) for v in row] for row in a.reshape(a.shape[0], -1)]
    return None


@dataclass
class _Disparity:
    gamma: list  # gamma[z][y]
    own_from_data: list  # per z
    comp_groups: list  # per z: groups pooled from data for the complement (empty -> table)


def _disparity(sums, sizes, fallback: ProbabilityTable | None) -> _Disparity:
    """Generic disparity from per-group sums of indicator (or soft) predictions."""
    n_groups = len(sizes)
    n_classes = len(sums[0])
    present = [z for z in range(n_groups) if sizes[z] > 0]
    gamma, own_flags, comp_sets = [], [], []
    for z in range(n_groups):
        if sizes[z] > 0:
            own = [sums[z][y] / sizes[z] for y in range(n_classes)]
            own_flags.append(True)
        elif fallback is not None and fallback.available(z):
            own = [float(v) for v in fallback.row(z)]
            own_flags.append(False)
        else:
            raise MissingGroupError(z)
        others = [g for g in present if g != z]
        if others:
            denom = sum(sizes[g] for g in others)
            comp = [sum(sums[g][y] for g in others) / denom for y in range(n_classes)]
        else:
            rows = [] if fallback is None else [g for g in range(n_groups) if g != z and fallback.available(g)]
            if not rows:
                raise MissingGroupError(z, side="complement")
            if fallback.weights is not None and sum(fallback.weights[g] for g in rows) > 0:
                w = np.array([fallback.weights[g] for g in rows], dtype=np.float64)
            else:
                w = np.ones(len(rows))
            w = w / w.sum()
            comp = [float(sum(w[j] * fallback.p[g, y] for j, g in enumerate(rows))) for y in range(n_classes)]
        gamma.append([own[y] - comp[y] for y in range(n_classes)])
        comp_sets.append(others)
    return _Disparity(gamma, own_flags, comp_sets)


def _argmax_yz(gamma) -> tuple[int, int]:
    """Largest entry; ties go to the smallest (y, z) in lexicographic order."""
    n_groups, n_classes = len(gamma), len(gamma[0])
    best, arg = None, (0, 0)
    for y in range(n_classes):
        for z in range(n_groups):
            if best is None or gamma[z][y] > best:
                best, arg = gamma[z][y], (y, z)
    return arg


def _hard_inputs(counts: GroupCounts):
    clamped = np.clip(np.nan_to_num(counts.counts, nan=0.0), 0.0, None)
    exact = _as_exact(clamped)
    if exact is not None:
        sizes = [sum(row) for row in exact]
        return exact, sizes
    return clamped.tolist(), clamped.sum(axis=1).tolist()


def gamma_hard(counts: GroupCounts, fallback: ProbabilityTable | None = None) -> np.ndarray:
    """Disparity matrix ``gamma[z, y]`` from prediction counts.

    Counts are clamped at zero and each row normalized by its own sum, so
    noisy counts still yield probabilities in [0, 1].
    """
    sums, sizes = _hard_inputs(counts)
    d = _disparity(sums, sizes, fallback)
    return np.array([[float(v) for v in row] for row in d.gamma])


def dpl_from_counts(counts: GroupCounts, fallback: ProbabilityTable | None = None) -> tuple[float, tuple[int, int]]:
    sums, sizes = _hard_inputs(counts)
    d = _disparity(sums, sizes, fallback)
    y, z = _argmax_yz(d.gamma)
    return float(d.gamma[z][y]), (y, z)


def dpl_hard(
    model: LinearModel, batch: Dataset, fallback: ProbabilityTable | None = None
) -> tuple[float, tuple[int, int]]:
    """Max disparity of the model's hard predictions on ``batch``."""
    if len(batch) == 0:
        raise ValueError("DPL of an empty batch is undefined")
    counts = group_counts(predict(model, batch.x), batch.z, batch.n_groups, model.n_classes)
    return dpl_from_counts(counts, fallback)


@dataclass(frozen=True)
class SoftDPL:
    value: float
    grads: np.ndarray  # (n, C, d+1), one per batch sample
    argmax: tuple[int, int]


def soft_gamma(model: LinearModel, batch: Dataset, fallback: ProbabilityTable | None = None) -> np.ndarray:
    """Disparity of mean softmax probabilities, ``gamma[z, y]``."""
    probs = forward(model, batch.x)
    sums, sizes = _soft_inputs(probs, batch)
    return np.array(_disparity(sums, sizes, fallback).gamma, dtype=np.float64)


def _soft_inputs(probs: np.ndarray, batch: Dataset):
    sums = np.zeros((batch.n_groups, probs.shape[1]))
    np.add.at(sums, batch.z, probs)
    sizes = np.bincount(batch.z, minlength=batch.n_groups).astype(np.float64)
    return sums.tolist(), sizes.tolist()


def dpl_soft(model: LinearModel, batch: Dataset, fallback: ProbabilityTable | None = None) -> SoftDPL:
    """Differentiable DPL surrogate with per-sample gradients.

    Hard indicators are replaced by softmax probabilities. The ``(y*, z*)``
    maximizer is fixed for the batch, so the gradient is a subgradient of the
    max. Probabilities supplied by the fallback table are constants.
    """
    if len(batch) == 0:
        raise ValueError("DPL of an empty batch is undefined")
    probs = forward(model, batch.x)
    sums, sizes = _soft_inputs(probs, batch)
    d = _disparity(sums, sizes, fallback)
    y_star, z_star = _argmax_yz(d.gamma)
    value = float(d.gamma[z_star][y_star])

    dp = per_sample_prob_grads(model, batch.x, y_star)
    coef = np.zeros(len(batch))
    if d.own_from_data[z_star]:
        coef[batch.z == z_star] = 1.0 / sizes[z_star]
    others = d.comp_groups[z_star]
    if others:
        mask = np.isin(batch.z, others)
        coef[mask] = -1.0 / sum(sizes[g] for g in others)
    return SoftDPL(value, coef[:, None, None] * dp, (y_star, z_star))


def lambda_init(
    controller: FairnessController,
    model: LinearModel,
    train_set: Dataset,
    round_idx: int,
    fallback: ProbabilityTable | None = None,
) -> float:
    """Starting lambda for a round: 1 only if the local data already miss the target."""
    if round_idx == 0:
        return 0.0
    value, _ = dpl_hard(model, train_set, fallback)
    return 0.0 if controller.target - value >= 0 else 1.0


def lambda_update(controller: FairnessController, batch_dpl: float, noise: float = 0.0) -> FairnessController:
    delta = controller.target - (batch_dpl + noise)
    velocity = controller.momentum * controller.velocity + delta
    lam = min(1.0, max(0.0, controller.lam - controller.rho * velocity))
    return replace(controller, lam=lam, velocity=velocity)
