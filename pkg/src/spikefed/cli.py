"""Command-line front end.

Subcommands: run, grid, metrics, plot-data, gen-data, validate.
Exit codes: 0 success, 1 validation failure, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .data import TaskSpec, generate, save_spike_file
from .errors import ConfigError, SinkCollisionError
from .experiments import (
    config_hash,
    emit_plot_data,
    expand_grid,
    paired_metrics,
    run_experiment,
    run_grid,
    spec_from_dict,
    summary_csv,
    validate_spec,
)
from .runlog import load_run, run_dir_name


def _load_json(path: str):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path} is not valid JSON: {err}")


def _load_spec(path: str, seed_override: int | None):
    raw = _load_json(path)
    spec = spec_from_dict(raw)
    if seed_override is not None:
        spec = dataclasses.replace(spec, master_seed=seed_override)
    return spec


def _cmd_run(args) -> int:
    spec = _load_spec(args.config, args.seed)
    problems = validate_spec(spec)
    if problems:
        for p in problems:
            print(f"invalid: {p}", file=sys.stderr)
        return 1
    run_dir = run_experiment(spec, args.out, force=args.force)
    print(run_dir)
    metrics = paired_metrics(spec, args.out) if spec.reference_id else None
    if metrics:
        for key in sorted(metrics):
            print(f"{key}={metrics[key]}")
    return 0


def _cmd_grid(args) -> int:
    doc = _load_json(args.config)
    specs = expand_grid(doc)
    if args.seed is not None:
        specs = [dataclasses.replace(s, master_seed=args.seed) for s in specs]
    bad = False
    for spec in specs:
        for p in validate_spec(spec):
            print(f"invalid [{spec.experiment_id}]: {p}", file=sys.stderr)
            bad = True
    if bad:
        return 1
    rows = run_grid(specs, args.out, force=args.force, workers=args.workers)
    csv_text = summary_csv(rows)
    out_csv = Path(args.out) / "summary.csv"
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    out_csv.write_text(csv_text, encoding="utf-8")
    print(out_csv)
    return 0


def _cmd_metrics(args) -> int:
    spec = _load_spec(args.config, args.seed)
    metrics = paired_metrics(spec, args.out)
    if metrics is None:
        print("no reference_id declared; nothing to pair", file=sys.stderr)
        return 1
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return 0


def _cmd_plot_data(args) -> int:
    run_dirs = []
    for config in args.configs:
        spec = _load_spec(config, None)
        run_dirs.append(Path(args.out) / run_dir_name(spec.experiment_id, config_hash(spec)))
    for d in run_dirs:
        load_run(d)  # raise early with a clear message if a run is missing
    text = emit_plot_data(run_dirs, args.kind)
    if args.csv_out:
        Path(args.csv_out).write_text(text, encoding="utf-8")
        print(args.csv_out)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_gen_data(args) -> int:
    raw = _load_json(args.config) if args.config else {}
    task = TaskSpec.from_dict(raw.get("task", raw)) if raw else TaskSpec()
    if args.seed is not None:
        task = dataclasses.replace(task, seed=args.seed)
    task.validate()
    dataset = generate(task)
    save_spike_file(args.out_file, dataset)
    print(f"{args.out_file}: {len(dataset.labels)} samples, "
          f"{dataset.spikes.shape[1]} steps, {dataset.spikes.shape[2]} channels")
    return 0


def _cmd_validate(args) -> int:
    raw = _load_json(args.config)
    if isinstance(raw, dict) and "cells" in raw:
        specs = expand_grid(raw)
    else:
        specs = [spec_from_dict(raw)]
    problems = []
    for spec in specs:
        problems.extend(f"[{spec.experiment_id}] {p}" for p in validate_spec(spec))
    if problems:
        for p in problems:
            print(f"invalid: {p}", file=sys.stderr)
        return 1
    print(f"ok: {len(specs)} spec(s) valid")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spikefed",
        description="Differentially private federated spiking-network simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config_nargs=None):
        if config_nargs is None:
            p.add_argument("config", help="experiment config JSON")
        p.add_argument("--out", default="runs", help="run-directory sink (default: runs)")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")

    p_run = sub.add_parser("run", help="execute one experiment")
    add_common(p_run)
    p_run.add_argument("--force", action="store_true", help="overwrite an existing run")
    p_run.set_defaults(func=_cmd_run)

    p_grid = sub.add_parser("grid", help="execute a grid of experiments")
    add_common(p_grid)
    p_grid.add_argument("--force", action="store_true", help="overwrite existing runs")
    p_grid.add_argument("--workers", type=int, default=1,
                        help="parallel worker processes (default: 1)")
    p_grid.set_defaults(func=_cmd_grid)

    p_metrics = sub.add_parser("metrics", help="paired metrics for a finished run")
    add_common(p_metrics)
    p_metrics.set_defaults(func=_cmd_metrics)

    p_plot = sub.add_parser("plot-data", help="emit plot-ready CSV from finished runs")
    p_plot.add_argument("configs", nargs="+", help="experiment config JSONs")
    p_plot.add_argument("--out", default="runs", help="run-directory sink")
    p_plot.add_argument("--kind", required=True,
                        choices=("layer_rates_by_eps", "client_histograms"))
    p_plot.add_argument("--csv-out", default=None, help="write CSV here instead of stdout")
    p_plot.set_defaults(func=_cmd_plot_data)

    p_gen = sub.add_parser("gen-data", help="generate a spike dataset file")
    p_gen.add_argument("out_file", help="destination spike file")
    p_gen.add_argument("--config", default=None,
                       help="JSON with task fields (or an experiment config)")
    p_gen.add_argument("--seed", type=int, default=None, help="override the task seed")
    p_gen.set_defaults(func=_cmd_gen_data)

    p_val = sub.add_parser("validate", help="validate a config without running it")
    p_val.add_argument("config", help="experiment or grid config JSON")
    p_val.set_defaults(func=_cmd_validate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"invalid: {err}", file=sys.stderr)
        return 1
    except SinkCollisionError as err:
        print(f"refusing: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # runtime failures keep a distinct exit code
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
