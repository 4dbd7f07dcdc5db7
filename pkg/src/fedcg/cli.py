"""Command-line entry point: train, compare, attack, report, gradcheck."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import (ConfigError, ExperimentConfig, default_output_dir, load_config,
                     parse_config, write_resolved_config)
from .experiment import (run_attack_grid, run_experiment, summarize_attacks,
                         summarize_strategies)
from .federation import STRATEGIES
from .metrics import read_metrics


def _load_cfg(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = parse_config("")
    if getattr(args, "strategy", None):
        cfg.strategy = args.strategy
    if getattr(args, "seeds", None):
        cfg.seeds = [int(s) for s in args.seeds.split(",")]
    if getattr(args, "output", None):
        cfg.output_dir = args.output
    if not cfg.output_dir:
        cfg.output_dir = default_output_dir()
    from .config import validate_config

    validate_config(cfg)
    return cfg


def _print_table(rows: list[dict], columns: list[str]) -> None:
    widths = {c: max(len(c), *(len(_fmt(r[c])) for r in rows)) if rows else len(c)
              for c in columns}
    header = "  ".join(c.ljust(widths[c]) for c in columns)
    print(header)
    print("-" * len(header))
    for r in rows:
        print("  ".join(_fmt(r[c]).ljust(widths[c]) for c in columns))


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    result = run_experiment(cfg, output_dir=cfg.output_dir,
                            progress=_progress if args.verbose else None)
    print(f"run {result.run_id}: mean best accuracy over {len(cfg.seeds)} seed(s) = "
          f"{result.mean_accuracy:.4f} ± {result.std_accuracy:.4f}")
    print(f"metrics: {os.path.join(cfg.output_dir, result.run_id + '.metrics.csv')}")
    return 0


def cmd_compare(args) -> int:
    cfg = _load_cfg(args)
    strategies = [s.strip() for s in args.strategies.split(",")]
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"unknown strategy '{s}' in --strategies")
    all_records = []
    for strategy in strategies:
        result = run_experiment(cfg, strategy=strategy, output_dir=cfg.output_dir,
                                progress=_progress if args.verbose else None)
        all_records.extend(result.records)
        print(f"[{strategy}] mean best accuracy = {result.mean_accuracy:.4f} "
              f"± {result.std_accuracy:.4f}")
    rows = summarize_strategies(all_records)
    print()
    _print_table(rows, ["strategy", "seeds", "mean_accuracy", "std_accuracy"])
    summary_path = os.path.join(cfg.output_dir, "compare_summary.csv")
    with open(summary_path, "w", encoding="utf-8") as fh:
        fh.write("strategy,seeds,mean_accuracy,std_accuracy\n")
        for r in rows:
            fh.write(f"{r['strategy']},{r['seeds']},{r['mean_accuracy']:.17g},"
                     f"{r['std_accuracy']:.17g}\n")
    print(f"summary: {summary_path}")
    return 0


def cmd_attack(args) -> int:
    cfg = _load_cfg(args)
    variants = [v.strip() for v in args.variants.split(",")]
    noise = [float(v) for v in args.noise_variances.split(",")] if args.noise_variances else []
    overrides = {}
    if args.budget:
        overrides["budget"] = args.budget
    seeds = cfg.seeds

    def progress(run):
        print(f"  {run.variant} nv={run.noise_variance:g} seed={run.seed}: "
              f"PSNR {run.result.psnr_db:.2f} dB ({run.result.wall_clock_s:.1f}s)")

    runs = run_attack_grid(cfg, variants, seeds, noise_variances=noise,
                           output_dir=cfg.output_dir, attack_overrides=overrides,
                           progress=progress if args.verbose else None)
    rows = summarize_attacks(runs)
    _print_table(rows, ["variant", "noise_variance", "seeds", "median_psnr_db",
                        "min_psnr_db", "max_psnr_db"])
    print(f"artifacts: {cfg.output_dir}")
    return 0


def cmd_report(args) -> int:
    records = []
    for path in args.metrics:
        records.extend(read_metrics(path))
    rows = summarize_strategies(records)
    if rows:
        print("strategy summary (mean over per-seed best accuracies):")
        _print_table(rows, ["run_id", "strategy", "seeds", "mean_accuracy", "std_accuracy"])
    psnr_rows = {}
    for rec in records:
        if rec.metric == "psnr_db":
            psnr_rows.setdefault((rec.run_id, rec.client), []).append(rec.value)
    if psnr_rows:
        print("\nattack summary (median PSNR):")
        table = [{"cell": f"{rid} {client}", "seeds": len(vals),
                  "median_psnr_db": float(np.median(vals))}
                 for (rid, client), vals in sorted(psnr_rows.items())]
        _print_table(table, ["cell", "seeds", "median_psnr_db"])
    if not rows and not psnr_rows:
        print("no summarizable records found")
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import full_suite

    results = full_suite(seeds=args.seeds)
    failed = 0
    for name, rep in sorted(results.items()):
        status = "PASS" if rep.passed else "FAIL"
        if not rep.passed:
            failed += 1
        print(f"{status}  {name:30s} max_rel_error={rep.max_rel_error:.3e} "
              f"(tolerance {rep.tolerance:g})")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else 1


def _progress(strategy, seed, round_idx):
    print(f"  [{strategy} seed {seed}] finished round {round_idx}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedcg",
        description="Desk-scale federated learning simulator with a conditional-GAN "
                    "privacy protocol and a gradient-inversion attack harness.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML config file (flat keys)")
        p.add_argument("--output", help="output directory (default $FEDCG_OUTPUT_DIR or ./runs)")
        p.add_argument("--seeds", help="comma-separated seed list overriding the config")
        p.add_argument("--verbose", action="store_true")

    p_train = sub.add_parser("train", help="run one strategy across seeds")
    common(p_train)
    p_train.add_argument("--strategy", choices=STRATEGIES)
    p_train.set_defaults(func=cmd_train)

    p_cmp = sub.add_parser("compare", help="train several strategies and summarize")
    common(p_cmp)
    p_cmp.add_argument("--strategies", default="local,fedavg,fedsplit,fedcg")
    p_cmp.set_defaults(func=cmd_compare)

    p_atk = sub.add_parser("attack", help="gradient-inversion PSNR grid")
    common(p_atk)
    p_atk.add_argument("--variants", default="fedavg,fedsplit,fedcg")
    p_atk.add_argument("--noise-variances", dest="noise_variances", default="",
                       help="comma-separated DP noise variances applied to the fedavg variant")
    p_atk.add_argument("--budget", type=int, default=0, help="override attack budget")
    p_atk.set_defaults(func=cmd_attack)

    p_rep = sub.add_parser("report", help="aggregate metrics files into summary tables")
    p_rep.add_argument("metrics", nargs="+", help="metrics csv files")
    p_rep.set_defaults(func=cmd_report)

    p_gc = sub.add_parser("gradcheck", help="finite-difference gradient verification suite")
    p_gc.add_argument("--seeds", type=int, default=20)
    p_gc.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
