"""Seeded experiment orchestration and JSONL/summary emission."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .client import (
    ClientState,
    FairnessSettings,
    client_rng,
    compute_statistics,
    local_train,
    share_statistics,
    share_totals,
)
from .config import ExperimentConfig
from .data import CsvSchema, PartitionSpec, SyntheticSpec, load_csv, partition, split_clients, synth_generate
from .fairness import MissingGroupError, ProbabilityTable, dpl_hard
from .linmodel import Dataset, LinearModel, accuracy
from .privacy import NoisePlan, plan_noise, privacy_report
from .server import (
    RoundReport,
    aggregate_and_table,
    complete_statistics,
    fedavg,
    global_disparity,
    sample_clients,
    weighted_mean,
)

log = logging.getLogger(__name__)

SERVER_STREAM = 7  # purpose tag for the server's client-sampling generator


@dataclass
class Setup:
    """Everything a seed needs that does not depend on the seed itself."""

    clients: list  # list[Dataset], indexed by client id
    train_ids: list
    eval_ids: list
    plan: NoisePlan
    delta: float | None
    n_classes: int
    dim: int
    code_mapping: dict | None = None


def load_dataset(cfg: ExperimentConfig) -> tuple[Dataset, dict | None]:
    if cfg.data.source == "csv":
        c = cfg.data.csv
        loaded = load_csv(c.path, CsvSchema(list(c.features), c.label, c.sensitive))
        return loaded.dataset, loaded.mapping()
    s = cfg.data.synthetic
    spec = SyntheticSpec(
        n=s.n, d=s.d, group_mix=s.group_mix, label_rates=tuple(s.label_rates), label_shift=s.label_shift,
        group_shift=s.group_shift, label_dims=s.label_dims, group_dims=s.group_dims, noise=s.noise, seed=s.seed,
    )
    return synth_generate(spec), None


def prepare(cfg: ExperimentConfig, evaluate_on: str = "test") -> Setup:
    """Load, partition and split the data, then calibrate the noise plan."""
    dataset, mapping = load_dataset(cfg)
    p = cfg.partition
    parts = partition(
        dataset,
        PartitionSpec(p.n_clients, p.unfair_fraction, p.zeta, p.target_group, p.target_label, p.mode, p.seed),
    )
    rng = np.random.default_rng(cfg.clients.split_seed)
    train, val, test = split_clients(p.n_clients, cfg.clients.n_test, cfg.clients.n_val, rng)
    if cfg.clients.merge_validation:
        train = sorted(train + val)
    eval_ids = val if evaluate_on == "val" else test
    if not eval_ids:
        raise ValueError(f"no {evaluate_on} clients configured")
    train = [k for k in train if len(parts.clients[k]) > 0]
    if not train:
        raise ValueError("every training client is empty")

    plan = NoisePlan(sampling_rate=cfg.fl.sampling_rate)
    delta = None
    if cfg.privacy.enabled:
        delta = cfg.privacy.delta
        if delta is None:
            delta = max(1.0 / len(parts.clients[k]) for k in train)
        plan = plan_noise(
            cfg.privacy.epsilon,
            delta,
            cfg.fl.sampling_rate,
            cfg.fl.rounds,
            cfg.fl.epochs,
            cfg.privacy.clip_bound,
            eps_split=cfg.privacy.eps_split,
            delta_split=cfg.privacy.delta_split,
            use_lambda_stream=cfg.fairness.mode == "tunable",
        )
    return Setup(parts.clients, train, eval_ids, plan, delta, dataset.n_classes, dataset.dim, mapping)


def _evaluate(model, datasets, p_table, noisy, sigma3, seed, round_idx):
    """Accuracy, pooled disparity and per-client disparities on held-out clients."""
    accs, sizes, completed, local = [], [], [], []
    for cid, ds in datasets:
        if len(ds) == 0:
            continue
        accs.append(accuracy(model, ds))
        sizes.append(len(ds))
        counts = compute_statistics(model, ds)
        if noisy:
            shared = share_statistics(counts, sigma3, client_rng(seed, round_idx, cid, 5))
            counts = complete_statistics(shared, counts.group_totals)
        completed.append(counts)
        try:
            local.append(dpl_hard(model, ds, p_table)[0])
        except MissingGroupError:
            log.debug("client %d: local disparity unavailable in round %d", cid, round_idx)
    pooled, _ = aggregate_and_table(completed)
    return weighted_mean(accs, sizes), global_disparity(pooled), local


def run_seed(cfg: ExperimentConfig, setup: Setup, seed: int, threads: int = 1) -> tuple[list, dict]:
    fairness = FairnessSettings(
        cfg.fairness.mode, cfg.fairness.lam, cfg.fairness.target, cfg.fairness.rho, cfg.fairness.momentum
    )
    plan = setup.plan
    model = LinearModel.init(setup.n_classes, setup.dim, seed)
    states = {
        k: ClientState(k, setup.clients[k], controller=fairness.controller(), seed=seed) for k in setup.train_ids
    }
    for k in setup.train_ids:
        share_totals(states[k], plan, seed)
    eval_sets = [(k, setup.clients[k]) for k in setup.eval_ids]

    p_table: ProbabilityTable | None = None
    rows = []
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for r in range(cfg.fl.rounds):
            srng = np.random.default_rng(np.random.SeedSequence([seed, r, SERVER_STREAM]))
            chosen = sample_clients(setup.train_ids, cfg.fl.client_fraction, srng)
            table = p_table if r > 0 else None

            def task(k, table=table, r=r, current=model):
                return local_train(
                    states[k], current, table, plan, r, cfg.fl.lr, cfg.fl.epochs, fairness, seed=seed
                )

            if pool is not None:
                updates = list(pool.map(task, chosen))
            else:
                updates = [task(k) for k in chosen]

            model = fedavg([u.model for u in updates], [u.n for u in updates])
            train_acc = weighted_mean([u.metrics["accuracy"] for u in updates], [u.n for u in updates])
            completed = [complete_statistics(u.noisy_stats, states[u.client_id].noisy_totals) for u in updates]
            pooled, p_table = aggregate_and_table(completed)
            train_gd = global_disparity(pooled)

            acc, gd, local = _evaluate(
                model, eval_sets, p_table, cfg.eval.noisy_test_stats, plan.sigma3, seed, r
            )
            eps = None
            if plan.enabled:
                eps = max(privacy_report(s.accountant, plan).eps for s in states.values())
            rows.append(
                RoundReport(
                    round=r,
                    accuracy=acc,
                    global_disparity=gd,
                    local_disparities=local,
                    lambda_mean=float(np.mean([u.metrics["lambda_mean"] for u in updates])),
                    eps_spent=eps,
                    train_accuracy=train_acc,
                    train_global_disparity=train_gd,
                    clients=[u.client_id for u in updates],
                    p_table=p_table.to_json(),
                )
            )
    finally:
        if pool is not None:
            pool.shutdown()

    final = rows[-1]
    summary = {
        "seed": seed,
        "accuracy": final.accuracy,
        "global_disparity": final.global_disparity,
        "local_disparity_mean": float(np.mean(final.local_disparities)) if final.local_disparities else None,
        "eps_spent": final.eps_spent,
    }
    if plan.enabled:
        worst = max(setup.train_ids, key=lambda k: privacy_report(states[k].accountant, plan).eps)
        summary["privacy"] = privacy_report(states[worst].accountant, plan).to_json()
    return rows, summary


def mean_stderr(values) -> dict:
    vals = [float(v) for v in values if v is not None]
    if not vals:
        return {"mean": None, "stderr": None, "n": 0}
    mean = float(np.mean(vals))
    stderr = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return {"mean": mean, "stderr": stderr, "n": len(vals)}


def dumps_row(row: dict) -> str:
    return json.dumps(row, sort_keys=True, allow_nan=False)


def run(cfg: ExperimentConfig, out_dir=None, threads: int = 1, evaluate_on: str = "test") -> Path:
    """Execute every seed and write ``config.json``, ``rounds.jsonl`` and ``summary.json``."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
    setup = prepare(cfg, evaluate_on)
    if setup.code_mapping is not None:
        (out / "codes.json").write_text(json.dumps(setup.code_mapping, indent=2, sort_keys=True) + "\n")

    all_rows, per_seed, failed = [], [], []
    for seed in cfg.seeds:
        try:
            rows, summary = run_seed(cfg, setup, seed, threads)
        except Exception as exc:  # one bad seed must not sink the others
            log.error("seed %d aborted: %s", seed, exc)
            failed.append({"seed": seed, "error": f"{type(exc).__name__}: {exc}"})
            continue
        all_rows.extend({"seed": seed, **row.to_json()} for row in rows)
        per_seed.append(summary)

    all_rows.sort(key=lambda row: (row["seed"], row["round"]))
    with (out / "rounds.jsonl").open("w", encoding="utf-8") as fh:
        for row in all_rows:
            fh.write(dumps_row(row) + "\n")

    summary = {
        "seeds": per_seed,
        "failed": failed,
        "accuracy": mean_stderr(s["accuracy"] for s in per_seed),
        "global_disparity": mean_stderr(s["global_disparity"] for s in per_seed),
        "local_disparity_mean": mean_stderr(s["local_disparity_mean"] for s in per_seed),
        "eps_spent": mean_stderr(s["eps_spent"] for s in per_seed),
        "target": cfg.fairness.target if cfg.fairness.mode != "none" else None,
        "noise_plan": setup.plan.to_json() if setup.plan.enabled else None,
        "delta": setup.delta,
        "epsilon_target": cfg.privacy.epsilon if cfg.privacy.enabled else None,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out
