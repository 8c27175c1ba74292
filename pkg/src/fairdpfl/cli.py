"""Command-line entry point: ``fairdpfl {gen-data,run,sweep,calibrate,report}``.

Exit status is 0 on success, 2 for configuration problems and 3 for
failures while running.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .privacy import STREAMS, calibrate_sigma, eps_from_rdp, rdp_vector, worst_case_steps, DEFAULT_ORDERS

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("fairdpfl")


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds or any(s < 0 for s in seeds):
        raise argparse.ArgumentTypeError("seeds must be non-negative integers")
    return seeds


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    if getattr(args, "seed", None):
        cfg = dataclasses.replace(cfg, seeds=list(args.seed)).validate()
    return cfg


def cmd_gen_data(args) -> int:
    from .data import SyntheticSpec, synth_generate

    cfg = _load(args)
    s = cfg.data.synthetic
    seed = args.seed[0] if args.seed else s.seed
    spec = SyntheticSpec(
        n=s.n, d=s.d, group_mix=s.group_mix, label_rates=tuple(s.label_rates), label_shift=s.label_shift,
        group_shift=s.group_shift, label_dims=s.label_dims, group_dims=s.group_dims, noise=s.noise, seed=seed,
    )
    ds = synth_generate(spec)
    out = Path(args.out or "synthetic.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(ds.dim)] + ["label", "sensitive"])
        for x, y, z in zip(ds.x, ds.y, ds.z):
            w.writerow([repr(float(v)) for v in x] + [int(y), int(z)])
    print(f"wrote {len(ds)} rows to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .runner import run

    cfg = _load(args)
    out = run(cfg, args.out, threads=args.threads)
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    acc, gap = summary["accuracy"], summary["global_disparity"]
    print(f"run directory: {out}")
    if acc["mean"] is not None:
        print(f"accuracy          {acc['mean']:.4f} +/- {acc['stderr']:.4f}")
    if gap["mean"] is not None:
        print(f"global disparity  {gap['mean']:.4f} +/- {gap['stderr']:.4f}")
    if summary["eps_spent"]["mean"] is not None:
        print(f"epsilon spent     {summary['eps_spent']['mean']:.4f} (target {summary['epsilon_target']})")
    if summary["failed"]:
        for f in summary["failed"]:
            print(f"seed {f['seed']} failed: {f['error']}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .sweep import SweepConfig, retrain, sweep

    cfg = _load(args)
    scfg = SweepConfig.load(args.space)
    result = sweep(scfg, cfg, threads=args.threads)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.json").write_text(json.dumps(result.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if not result.feasible:
        print(f"no feasible trial (target {result.target}); table in {out / 'sweep.json'}")
        return EXIT_RUNTIME
    best = result.best
    print(f"best trial {best.index}: accuracy {best.accuracy:.4f}, disparity {best.disparity:.4f}")
    print(json.dumps(best.params, sort_keys=True))
    if args.retrain:
        run_dir = retrain(cfg, result, out / "retrain", threads=args.threads)
        print(f"retrained into {run_dir}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    split = args.eps_split
    if len(split) != 3 or abs(sum(split) - 1) > 1e-9:
        raise ConfigError("--eps-split needs three shares summing to 1")
    steps = worst_case_steps(args.rounds, args.epochs, args.q)
    rates = (args.q, args.q, 1.0)
    rows = []
    for name, share, q, n in zip(STREAMS, split, rates, steps):
        eps_i, delta_i = args.epsilon * share, args.delta / 3
        sigma = calibrate_sigma(eps_i, delta_i, q, n)
        back = eps_from_rdp(rdp_vector(q, sigma, n), DEFAULT_ORDERS, delta_i)[0]
        rows.append((name, eps_i, delta_i, q, n, sigma, back))
    print(f"{'stream':<8} {'eps':>8} {'delta':>11} {'q':>6} {'steps':>6} {'sigma':>10} {'eps(sigma)':>11}")
    for name, eps_i, delta_i, q, n, sigma, back in rows:
        print(f"{name:<8} {eps_i:>8.4f} {delta_i:>11.4g} {q:>6g} {n:>6d} {sigma:>10.4f} {back:>11.4f}")
    total = sum(r[-1] for r in rows)
    print(f"total eps {total:.4f} <= {args.epsilon}, delta {args.delta:g}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import report

    paths = report(args.run_dir, args.out)
    for p in paths.values():
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairdpfl", description="Fair, differentially private federated learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--seed", type=_seeds, help="comma-separated seeds, overriding the config")
        p.add_argument("--out", help=out_help)
        p.add_argument("--threads", type=int, default=1, help="parallel client updates per round")

    p = sub.add_parser("gen-data", help="write the synthetic dataset to CSV")
    common(p, "CSV path (default synthetic.csv)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("run", help="run an experiment")
    common(p, "run directory (default: config out_dir)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="random-search hyperparameters on validation clients")
    common(p, "directory for sweep.json")
    p.add_argument("--space", required=True, help="sweep config (JSON) with the search space")
    p.add_argument("--retrain", action="store_true", help="re-run the best trial afterwards")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("calibrate", help="print calibrated noise multipliers")
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--q", type=float, default=0.1, help="Poisson sampling rate")
    p.add_argument("--rounds", type=int, default=30)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--eps-split", type=float, nargs=3, default=[0.8, 0.1, 0.1], metavar=("TRAIN", "LAMBDA", "STATS"))
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("report", help="emit CSV tables from a run directory")
    p.add_argument("run_dir")
    p.add_argument("--out", help="output directory (default: the run directory)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
