"""Random-search hyperparameter sweep scored by the constrained validation objective.

A trial's score is its validation accuracy when the validation disparity
meets the target and ``-inf`` otherwise, so an infeasible trial can never be
selected over a feasible one.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, config_from_dict, set_path
from .runner import prepare, run, run_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Param:
    """One search dimension: a numeric range or a list of choices."""

    low: float | None = None
    high: float | None = None
    log: bool = False
    integer: bool = False
    choices: tuple | None = None

    def __post_init__(self):
        if self.choices is not None:
            if len(self.choices) == 0:
                raise ConfigError("choices must be non-empty")
            return
        if self.low is None or self.high is None:
            raise ConfigError("a range needs both low and high (or give choices)")
        if self.low > self.high:
            raise ConfigError(f"low {self.low} exceeds high {self.high}")
        if self.log and self.low <= 0:
            raise ConfigError("log-scaled ranges need low > 0")

    @classmethod
    def from_dict(cls, raw: dict) -> "Param":
        if not isinstance(raw, dict):
            raise ConfigError(f"search dimension must be an object, got {raw!r}")
        unknown = set(raw) - {"low", "high", "log", "integer", "choices"}
        if unknown:
            raise ConfigError(f"unknown search key(s) {sorted(unknown)}")
        choices = raw.get("choices")
        return cls(
            low=raw.get("low"),
            high=raw.get("high"),
            log=bool(raw.get("log", False)),
            integer=bool(raw.get("integer", False)),
            choices=tuple(choices) if choices is not None else None,
        )

    def draw(self, rng: np.random.Generator):
        if self.choices is not None:
            return self.choices[int(rng.integers(len(self.choices)))]
        if self.log:
            value = float(math.exp(rng.uniform(math.log(self.low), math.log(self.high))))
        else:
            value = float(rng.uniform(self.low, self.high))
        return int(round(value)) if self.integer else value


@dataclass(frozen=True)
class SweepConfig:
    space: dict  # dotted config path -> Param
    trials: int = 20
    seed: int = 0
    target: float | None = None  # None -> the base config's fairness target

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trial budget must be >= 1")
        if not self.space:
            raise ConfigError("search space is empty")

    @classmethod
    def from_dict(cls, raw: dict) -> "SweepConfig":
        unknown = set(raw) - {"space", "trials", "seed", "target"}
        if unknown:
            raise ConfigError(f"sweep config: unknown key(s) {sorted(unknown)}")
        space = {path: Param.from_dict(spec) for path, spec in dict(raw.get("space", {})).items()}
        return cls(space, int(raw.get("trials", 20)), int(raw.get("seed", 0)), raw.get("target"))

    @classmethod
    def load(cls, path) -> "SweepConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read sweep config {path}: {exc}") from exc
        return cls.from_dict(raw)


@dataclass
class Trial:
    index: int
    params: dict
    accuracy: float | None
    disparity: float | None
    score: float
    error: str | None = None

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "params": self.params,
            "accuracy": self.accuracy,
            "disparity": self.disparity,
            "score": None if math.isinf(self.score) else self.score,
            "feasible": not math.isinf(self.score),
            "error": self.error,
        }


@dataclass
class SweepResult:
    target: float
    trials: list = field(default_factory=list)
    best: Trial | None = None

    @property
    def feasible(self) -> bool:
        return self.best is not None

    def to_json(self) -> dict:
        return {
            "target": self.target,
            "status": "ok" if self.feasible else "no feasible trial",
            "best": self.best.to_json() if self.best else None,
            "trials": [t.to_json() for t in self.trials],
        }


def psi(accuracy: float | None, disparity: float | None, target: float) -> float:
    """Validation accuracy, or -inf when the disparity misses the target (or is unknown)."""
    if accuracy is None or disparity is None or disparity > target:
        return -math.inf
    return float(accuracy)


def select_best(trials) -> Trial | None:
    """Highest score wins; ties go to the earlier trial; all -inf gives None."""
    best = None
    for t in trials:
        if math.isinf(t.score):
            continue
        if best is None or t.score > best.score:
            best = t
    return best


def draw_params(space: dict, rng: np.random.Generator) -> dict:
    # iterate in sorted order so the draw sequence does not depend on dict insertion
    return {path: space[path].draw(rng) for path in sorted(space)}


def apply_params(base: ExperimentConfig, params: dict) -> ExperimentConfig:
    cfg = base
    for path, value in params.items():
        cfg = set_path(cfg, path, value)
    return cfg


def validation_score(cfg: ExperimentConfig, threads: int = 1) -> tuple[float, float | None]:
    """Mean final accuracy and disparity over the config's seeds, measured on validation clients."""
    setup = prepare(cfg, evaluate_on="val")
    accs, gaps = [], []
    for seed in cfg.seeds:
        _, summary = run_seed(cfg, setup, seed, threads)
        accs.append(summary["accuracy"])
        gaps.append(summary["global_disparity"])
    gap = None if any(g is None for g in gaps) else float(np.mean(gaps))
    return float(np.mean(accs)), gap


def sweep(sweep_cfg: SweepConfig, base: ExperimentConfig, threads: int = 1, evaluate=None) -> SweepResult:
    """Random search over ``sweep_cfg.space``.

    ``evaluate(cfg) -> (accuracy, disparity)`` defaults to training on the
    training clients and measuring on the validation clients.
    """
    if base.clients.n_val < 1:
        raise ConfigError("a sweep needs validation clients (clients.n_val >= 1)")
    target = sweep_cfg.target if sweep_cfg.target is not None else base.fairness.target
    evaluate = evaluate or (lambda cfg: validation_score(cfg, threads))
    rng = np.random.default_rng(sweep_cfg.seed)
    result = SweepResult(target=float(target))
    for i in range(sweep_cfg.trials):
        params = draw_params(sweep_cfg.space, rng)
        try:
            cfg = apply_params(base, params)
            acc, gap = evaluate(cfg)
            trial = Trial(i, params, acc, gap, psi(acc, gap, target))
        except ConfigError:
            raise
        except Exception as exc:  # a diverging trial is infeasible, not fatal
            log.warning("trial %d failed: %s", i, exc)
            trial = Trial(i, params, None, None, -math.inf, f"{type(exc).__name__}: {exc}")
        log.info("trial %d: %s -> score %s", i, params, trial.score)
        result.trials.append(trial)
    result.best = select_best(result.trials)
    return result


def retrain(base: ExperimentConfig, result: SweepResult, out_dir, threads: int = 1, evaluate_on: str = "val") -> Path:
    """Re-run the winning configuration and write a normal run directory."""
    if not result.feasible:
        raise ValueError("no feasible trial to retrain")
    cfg = apply_params(base, result.best.params)
    return run(cfg, out_dir, threads=threads, evaluate_on=evaluate_on)


def experiment_matrix(
    base: ExperimentConfig,
    targets,
    lam: float = 0.5,
) -> dict:
    """The six method variants, with the fair ones repeated for every target.

    Returns ``name -> ExperimentConfig``; the fixed-lambda value is a
    placeholder meant to be replaced by a sweep for each target.
    """
    raw = base.to_dict()

    def variant(mode, private, target=None):
        d = json.loads(json.dumps(raw))
        d["fairness"]["mode"] = mode
        d["fairness"]["lam"] = lam if mode == "fixed" else 0.0
        if target is not None:
            d["fairness"]["target"] = target
        d["privacy"]["enabled"] = private
        return config_from_dict(d)

    out = {"baseline": variant("none", False), "dp": variant("none", True)}
    for t in targets:
        tag = f"T{t:g}"
        out[f"fair_fixed_{tag}"] = variant("fixed", False, t)
        out[f"fair_tunable_{tag}"] = variant("tunable", False, t)
        out[f"dp_fair_fixed_{tag}"] = variant("fixed", True, t)
        out[f"dp_fair_tunable_{tag}"] = variant("tunable", True, t)
    return out
