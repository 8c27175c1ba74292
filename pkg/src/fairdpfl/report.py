"""Turn a run directory's JSONL log into plot-ready CSV tables."""

from __future__ import annotations

import csv
import json
from pathlib import Path


class ReportError(ValueError):
    pass


REQUIRED = ("seed", "round", "accuracy", "global_disparity", "local_disparities")


def read_rounds(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise ReportError(f"{path}: no such file")
    rows = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ReportError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(row, dict):
                raise ReportError(f"{path}:{lineno}: expected a JSON object")
            missing = [k for k in REQUIRED if k not in row]
            if missing:
                raise ReportError(f"{path}:{lineno}: missing field(s) {missing}")
            rows.append(row)
    if not rows:
        raise ReportError(f"{path}: no rounds recorded")
    return rows


def empirical_cdf(values) -> list[tuple[float, float]]:
    """(value, cumulative fraction) pairs over the ascending sample."""
    vals = sorted(float(v) for v in values)
    n = len(vals)
    return [(v, (i + 1) / n) for i, v in enumerate(vals)]


def _target(run_dir: Path):
    summary = run_dir / "summary.json"
    if summary.exists():
        return json.loads(summary.read_text(encoding="utf-8")).get("target")
    cfg = run_dir / "config.json"
    if cfg.exists():
        f = json.loads(cfg.read_text(encoding="utf-8")).get("fairness", {})
        return f.get("target") if f.get("mode", "none") != "none" else None
    return None


def _write(path: Path, header, rows):
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in r])


def report(run_dir, out_dir=None) -> dict:
    """Write ``accuracy.csv``, ``disparity.csv`` and ``cdf.csv``; return their paths."""
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir else run_dir
    out.mkdir(parents=True, exist_ok=True)
    rows = sorted(read_rounds(run_dir / "rounds.jsonl"), key=lambda r: (r["seed"], r["round"]))
    target = _target(run_dir)

    paths = {name: out / f"{name}.csv" for name in ("accuracy", "disparity", "cdf")}
    _write(
        paths["accuracy"],
        ["seed", "round", "accuracy", "train_accuracy"],
        [(r["seed"], r["round"], r["accuracy"], r.get("train_accuracy")) for r in rows],
    )

    def local_mean(r):
        loc = r["local_disparities"]
        return sum(loc) / len(loc) if loc else None

    _write(
        paths["disparity"],
        ["seed", "round", "global_disparity", "train_global_disparity", "local_disparity_mean", "target"],
        [
            (r["seed"], r["round"], r["global_disparity"], r.get("train_global_disparity"), local_mean(r), target)
            for r in rows
        ],
    )

    final = {}
    for r in rows:
        final[r["seed"]] = r  # rows are sorted, so the last one per seed wins
    cdf_rows = []
    for seed in sorted(final):
        cdf_rows.extend((seed, v, frac) for v, frac in empirical_cdf(final[seed]["local_disparities"]))
    _write(paths["cdf"], ["seed", "value", "cumulative_fraction"], cdf_rows)
    return paths
