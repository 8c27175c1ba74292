"""Client-side training: DP-SGD with a DPL regularizer and a tunable lambda."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .fairness import (
    FairnessController,
    GroupCounts,
    MissingGroupError,
    ProbabilityTable,
    dpl_hard,
    dpl_soft,
    group_counts,
    lambda_init,
    lambda_update,
)
from .linmodel import Dataset, LinearModel, accuracy, per_sample_loss_grads, predict
from .privacy import AccountantState, NoisePlan, clip_rows, gaussianize

FAIRNESS_MODES = ("none", "fixed", "tunable")


@dataclass(frozen=True)
class FairnessSettings:
    mode: str = "none"
    lam: float = 0.0  # used when mode == "fixed"
    target: float = 0.1
    rho: float = 0.1
    momentum: float = 0.0

    def __post_init__(self):
        if self.mode not in FAIRNESS_MODES:
            raise ValueError(f"fairness mode must be one of {FAIRNESS_MODES}, got {self.mode!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("fixed lambda must be in [0, 1]")

    def controller(self) -> FairnessController:
        return FairnessController(lam=0.0, velocity=0.0, momentum=self.momentum, rho=self.rho, target=self.target)


@dataclass
class ClientState:
    client_id: int
    dataset: Dataset
    controller: FairnessController = field(default_factory=FairnessController)
    seed: int = 0
    accountant: AccountantState = field(default_factory=AccountantState)
    noisy_totals: np.ndarray | None = None
    rounds_selected: int = 0

    @property
    def n(self) -> int:
        return len(self.dataset)


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    model: LinearModel
    n: int
    noisy_stats: GroupCounts
    metrics: dict


def client_rng(seed: int, round_idx: int, client_id: int, purpose: int) -> np.random.Generator:
    """Independent generator per (run seed, round, client, purpose)."""
    return np.random.default_rng(np.random.SeedSequence([seed, round_idx, client_id, purpose]))


def poisson_batches(n: int, q: float, epochs: int, rng: np.random.Generator) -> list[np.ndarray]:
    """``ceil(1/q)`` Poisson-sampled index sets per epoch; batches may be empty."""
    if not 0 < q <= 1:
        raise ValueError("sampling rate must be in (0, 1]")
    per_epoch = math.ceil(1.0 / q)
    out = []
    for _ in range(epochs * per_epoch):
        if q == 1.0:
            out.append(np.arange(n))
        else:
            out.append(np.flatnonzero(rng.random(n) < q))
    return out


def compute_statistics(model: LinearModel, dataset: Dataset) -> GroupCounts:
    return group_counts(predict(model, dataset.x), dataset.z, dataset.n_groups, model.n_classes)


def share_statistics(counts: GroupCounts, sigma3: float, rng: np.random.Generator) -> GroupCounts:
    """Noisy release of every class column except class 0.

    Class 0 is left as NaN; the server rebuilds it from the group totals.
    """
    shared = counts.counts.copy()
    shared[:, 1:] = gaussianize(shared[:, 1:], sigma3, rng)
    shared[:, 0] = np.nan
    return GroupCounts(shared, np.full(counts.n_groups, np.nan))


def share_totals(state: ClientState, plan: NoisePlan, seed: int) -> np.ndarray:
    """One-off noisy release of the per-group sample counts."""
    totals = np.bincount(state.dataset.z, minlength=state.dataset.n_groups).astype(np.float64)
    rng = client_rng(seed, 0, state.client_id, 4)
    noisy = gaussianize(totals, plan.sigma3, rng) if plan.enabled else totals
    if plan.enabled:
        state.accountant.step("stats", 1.0, plan.sigma3)
    state.noisy_totals = np.asarray(noisy, dtype=np.float64)
    return state.noisy_totals


def _soft_or_skip(model, batch, fallback):
    try:
        return dpl_soft(model, batch, fallback)
    except MissingGroupError:
        return None


def local_train(
    state: ClientState,
    global_model: LinearModel,
    p_table: ProbabilityTable | None,
    plan: NoisePlan,
    round_idx: int,
    lr: float,
    epochs: int,
    fairness: FairnessSettings,
    seed: int = 0,
) -> ClientUpdate:
    """One round of local training followed by the noisy statistics release."""
    data = state.dataset
    if len(data) == 0:
        raise ValueError(f"client {state.client_id} has no training data")
    if global_model.dim != data.dim:
        raise ValueError(f"model dim {global_model.dim} != data dim {data.dim}")
    n_k = len(data)
    q = plan.sampling_rate
    batch_rng = client_rng(seed, round_idx, state.client_id, 0)
    grad_rng = client_rng(seed, round_idx, state.client_id, 1)
    lam_rng = client_rng(seed, round_idx, state.client_id, 2)
    stats_rng = client_rng(seed, round_idx, state.client_id, 3)

    w = np.array(global_model.weights)
    model = global_model
    tunable = fairness.mode == "tunable"
    controller = replace(state.controller, velocity=0.0)
    if tunable:
        try:
            lam0 = lambda_init(controller, model, data, round_idx, p_table)
        except MissingGroupError:
            lam0 = 0.0
        controller = replace(controller, lam=lam0)
    lam_fixed = fairness.lam if fairness.mode == "fixed" else 0.0
    lam_trace = []

    batches = poisson_batches(n_k, q, epochs, batch_rng)
    for idx in batches:
        if len(idx) == 0:
            continue
        batch = data.subset(idx)
        lam = controller.lam if tunable else lam_fixed
        g = per_sample_loss_grads(model, batch)
        soft = None
        if tunable or lam > 0:
            soft = _soft_or_skip(model, batch, p_table)
            if soft is not None and lam > 0:
                # soft.grads sum to the DPL gradient; rescale so their batch mean does, like the loss terms
                g = (1.0 - lam) * g + lam * len(idx) * soft.grads
            elif lam > 0:
                g = (1.0 - lam) * g
        if plan.enabled:
            g = clip_rows(g, plan.clip_bound)
            assert np.all(np.linalg.norm(g.reshape(len(g), -1), axis=1) <= plan.clip_bound * (1 + 1e-12))
            total = g.sum(axis=0)
            total = gaussianize(total, plan.sigma1 * plan.clip_bound, grad_rng)
            step = total / (q * n_k)
        else:
            step = g.sum(axis=0) / len(idx)
        w = w - lr * step
        model = LinearModel(w)
        if tunable:
            batch_dpl = soft.value if soft is not None else 0.0
            noise = gaussianize(0.0, plan.sigma2, lam_rng) if plan.enabled else 0.0
            controller = lambda_update(controller, batch_dpl, noise)
            lam_trace.append(controller.lam)

    if plan.enabled:
        state.accountant.step("train", q, plan.sigma1, len(batches))
        if tunable:
            state.accountant.step("lambda", q, plan.sigma2, len(batches))
        state.accountant.step("stats", 1.0, plan.sigma3)
    state.controller = controller
    state.rounds_selected += 1

    counts = compute_statistics(model, data)
    noisy = share_statistics(counts, plan.sigma3 if plan.enabled else 0.0, stats_rng)
    try:
        train_dpl = dpl_hard(model, data, p_table)[0]
    except MissingGroupError:
        train_dpl = None
    final_lam = controller.lam if tunable else lam_fixed
    metrics = {
        "accuracy": accuracy(model, data),
        "dpl": train_dpl,
        "lambda": float(final_lam),
        "lambda_mean": float(np.mean(lam_trace)) if lam_trace else float(final_lam),
        "batches": len(batches),
    }
    return ClientUpdate(state.client_id, model, n_k, noisy, metrics)
