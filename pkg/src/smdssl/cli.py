"""Command-line entry point.

Commands: gen-data, pretrain, finetune, eval, sweep-beta, cka. All
hyperparameters live in the JSON config; flags carry only paths and command
selection. Exit codes: 0 success, 2 usage/validation, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import ConfigError, load_run_config
from .pipeline import apply_thread_cap, run_beta_sweep, run_cka, run_eval, run_finetune, run_pretrain
from .training import NonFiniteLossError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def cmd_gen_data(args):
    from .cohort import CohortSpec, default_specs, generate
    from .data import write_visits

    presets = default_specs()
    if args.spec in presets:
        spec = presets[args.spec]
    else:
        if not os.path.exists(args.spec):
            raise FileNotFoundError(f"cohort spec not found: {args.spec}")
        spec = CohortSpec.from_json(args.spec)
    os.makedirs(args.out, exist_ok=True)
    visits = generate(spec)
    out_path = os.path.join(args.out, "visits.jsonl")
    write_visits(visits, out_path, inline_signals=args.inline_signals)
    with open(os.path.join(args.out, "cohort_spec.json"), "w", encoding="utf-8") as f:
        json.dump(spec.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {len(visits)} visits to {out_path}")


def cmd_pretrain(args):
    cfg = load_run_config(args.config)
    result = run_pretrain(cfg)
    print(f"pretrain done: {result['checkpoint']} ({len(result['curves'].steps)} steps)")


def cmd_finetune(args):
    cfg = load_run_config(args.config)
    result = run_finetune(cfg, args.task, args.strategy,
                          checkpoint=args.checkpoint, out_dir=args.out)
    fit = result["fit"]
    print(f"finetune done: {args.task}/{args.strategy} "
          f"best val AUROC {fit.best_val_auroc:.4f} at epoch {fit.best_epoch}")


def cmd_eval(args):
    entry = run_eval(args.run_dir, args.task)
    print(f"eval done: {args.task} [{entry['strategy']}] "
          f"AUROC {entry['auroc']:.4f} "
          f"[{entry['auroc_ci95'][0]:.4f}, {entry['auroc_ci95'][1]:.4f}]")


def cmd_sweep_beta(args):
    cfg = load_run_config(args.config)
    grid = [float(x) for x in args.grid.split(",") if x.strip()]
    rows, csv_path = run_beta_sweep(cfg, grid, task=args.task)
    print(f"sweep done: {len(rows)} rows -> {csv_path}")


def cmd_cka(args):
    dirs = [d.strip() for d in args.runs.split(",") if d.strip()]
    if len(dirs) != 3:
        raise ConfigError("--runs needs exactly three run dirs: smd,component_only,global_only")
    run_dirs = dict(zip(("smd", "component_only", "global_only"), dirs))
    report = run_cka(run_dirs, probe_size=args.probe_size, out_path=args.out)
    for row in report["per_stage"]:
        print(f"stage {row['stage']}: vs_component {row['vs_component']:.3f} "
              f"vs_global {row['vs_global']:.3f}")


def build_parser():
    parser = argparse.ArgumentParser(prog="smdssl")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic cohort")
    p.add_argument("--spec", required=True, help="preset name (small|medium) or spec JSON path")
    p.add_argument("--out", required=True)
    p.add_argument("--inline-signals", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="run self-supervised pre-training")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune from a checkpoint (or random init)")
    p.add_argument("--config", required=True)
    p.add_argument("--task", required=True, choices=("elevated_map", "mortality24"))
    p.add_argument("--strategy", required=True, choices=("linear", "full_ft"))
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", default=None, help="run dir (default: config out_dir)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a run dir with fitted strategies")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--task", required=True, choices=("elevated_map", "mortality24"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-beta", help="component-weight sensitivity sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True, help="comma-separated weights")
    p.add_argument("--task", default="elevated_map", choices=("elevated_map", "mortality24"))
    p.set_defaults(func=cmd_sweep_beta)

    p = sub.add_parser("cka", help="representation similarity across three runs")
    p.add_argument("--runs", required=True, help="smd_dir,component_dir,global_dir")
    p.add_argument("--probe-size", type=int, default=512)
    p.add_argument("--out", default=None, help="CSV output path")
    p.set_defaults(func=cmd_cka)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    apply_thread_cap()
    try:
        args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLossError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
