"""Declarative experiment runner.

An ExperimentSpec is a plain JSON document; `run_experiment` turns one into a
run directory (round logs, manifest, summary) and, when a reference run is
present, the paired ablation metrics. A grid file is a list of specs sharing
defaults; cells run in separate processes and own their directories
exclusively, so worker count cannot affect results.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import TaskSpec, generate, load_spike_file, split_dataset
from .dp import DpConfig, calibrate_sigma
from .errors import ConfigError, PairingError
from .federation import (
    ClientState,
    FederationKnobs,
    FederatedSimulation,
    dirichlet_partition,
    partition_with_proportions,
)
from .lif import LifConfig, NetworkArch
from .params import ModelParams
from .rng import substream
from .runlog import (
    PairedRuns,
    RunWriter,
    canonical_json,
    lambda_deviation,
    load_run,
    ranking_stability,
    rmse_metric,
    run_dir_name,
)

__all__ = [
    "ExperimentSpec",
    "validate_spec",
    "spec_from_dict",
    "config_hash",
    "run_experiment",
    "run_grid",
    "expand_grid",
    "paired_metrics",
    "summary_csv",
    "emit_plot_data",
    "SUMMARY_COLUMNS",
]


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything needed to reproduce one run, hashable as canonical JSON."""

    experiment_id: str = "run"
    task: TaskSpec = field(default_factory=TaskSpec)
    task_file: str | None = None  # overrides `task` generation when set
    hidden_sizes: tuple = (64,)
    lif: LifConfig = field(default_factory=LifConfig)
    n_clients: int = 10
    rounds: int = 10
    local_epochs: int = 1
    batch_size: int = 64
    lr: float = 1e-3
    partition_alpha: float = 1.0
    partition_seed: int | None = None  # defaults to master_seed
    aggregator: str = "fedavg"
    selection: str = "all"
    select_p: int | None = None
    kappa: float = 1.0
    staleness_exponent: float = 0.5
    rate_sigma_min: float = 1e-4
    train_all_candidates: bool = True
    dp: DpConfig | None = None
    detach_reset: bool = True
    w_scale: float = 1.0
    master_seed: int = 0
    reference_id: str | None = None
    split_fractions: tuple = (0.7, 0.15, 0.15)
    eval_chunk: int = 256
    not_in_reference_table: bool = False

    def effective_partition_seed(self) -> int:
        return self.master_seed if self.partition_seed is None else self.partition_seed

    def to_dict(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "task": self.task.to_dict(),
            "task_file": self.task_file,
            "hidden_sizes": list(self.hidden_sizes),
            "lif": self.lif.to_dict(),
            "n_clients": self.n_clients,
            "rounds": self.rounds,
            "local_epochs": self.local_epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "partition_alpha": self.partition_alpha,
            "partition_seed": self.partition_seed,
            "aggregator": self.aggregator,
            "selection": self.selection,
            "select_p": self.select_p,
            "kappa": self.kappa,
            "staleness_exponent": self.staleness_exponent,
            "rate_sigma_min": self.rate_sigma_min,
            "train_all_candidates": self.train_all_candidates,
            "dp": None if self.dp is None else self.dp.to_dict(),
            "detach_reset": self.detach_reset,
            "w_scale": self.w_scale,
            "master_seed": self.master_seed,
            "reference_id": self.reference_id,
            "split_fractions": list(self.split_fractions),
            "eval_chunk": self.eval_chunk,
            "not_in_reference_table": self.not_in_reference_table,
        }


def spec_from_dict(raw: dict) -> ExperimentSpec:
    """Build a spec from a JSON document, rejecting unknown keys."""
    if not isinstance(raw, dict):
        raise ConfigError("experiment config must be a JSON object")
    known = {f.name for f in dataclasses.fields(ExperimentSpec)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = dict(raw)
    if "task" in kwargs and kwargs["task"] is not None:
        kwargs["task"] = TaskSpec.from_dict(kwargs["task"])
    if "lif" in kwargs and kwargs["lif"] is not None:
        kwargs["lif"] = LifConfig.from_dict(kwargs["lif"])
    if "dp" in kwargs and kwargs["dp"] is not None:
        kwargs["dp"] = DpConfig.from_dict(kwargs["dp"])
    for key in ("hidden_sizes", "split_fractions"):
        if key in kwargs and kwargs[key] is not None:
            kwargs[key] = tuple(kwargs[key])
    return ExperimentSpec(**kwargs)


def validate_spec(spec: ExperimentSpec) -> list:
    """Collect every violation (empty list means valid); never raises."""
    problems = []

    def check(ok: bool, message: str) -> None:
        if not ok:
            problems.append(message)

    check(bool(spec.experiment_id), "experiment_id must be non-empty")
    check(
        all(ch.isalnum() or ch in "-_" for ch in spec.experiment_id),
        "experiment_id must use only letters, digits, '-' and '_'",
    )
    try:
        spec.task.validate()
    except ConfigError as err:
        problems.append(f"task: {err}")
    try:
        spec.lif.validate()
    except ConfigError as err:
        problems.append(f"lif: {err}")
    check(len(spec.hidden_sizes) >= 1, "need at least one hidden layer")
    check(
        all(isinstance(h, int) and h >= 1 for h in spec.hidden_sizes),
        "hidden sizes must be positive integers",
    )
    check(spec.n_clients >= 1, "n_clients must be >= 1")
    check(spec.rounds >= 1, "rounds must be >= 1")
    check(spec.local_epochs >= 1, "local_epochs must be >= 1")
    check(spec.batch_size >= 1, "batch_size must be >= 1")
    check(spec.lr > 0, "lr must be positive")
    check(spec.partition_alpha > 0, "partition_alpha must be positive")
    check(spec.aggregator in ("fedavg", "rate_weight"),
          "aggregator must be 'fedavg' or 'rate_weight'")
    check(spec.selection in ("all", "delta_r"),
          "selection must be 'all' or 'delta_r'")
    if spec.select_p is not None:
        check(1 <= spec.select_p <= spec.n_clients,
              f"select_p must lie in [1, {spec.n_clients}]")
    check(spec.kappa > 0, "kappa must be positive")
    check(spec.staleness_exponent >= 0, "staleness_exponent must be >= 0")
    check(spec.rate_sigma_min > 0, "rate_sigma_min must be positive")
    if spec.dp is not None:
        try:
            spec.dp.validate()
        except ConfigError as err:
            problems.append(f"dp: {err}")
    check(spec.w_scale > 0, "w_scale must be positive")
    check(len(spec.split_fractions) == 3, "split_fractions must name train/val/test")
    check(
        all(f > 0 for f in spec.split_fractions)
        and abs(sum(spec.split_fractions) - 1.0) < 1e-9,
        "split_fractions must be positive and sum to 1",
    )
    check(spec.eval_chunk >= 1, "eval_chunk must be >= 1")
    if spec.reference_id is not None:
        check(spec.reference_id != spec.experiment_id,
              "a run cannot reference itself")
    return problems


def config_hash(spec: ExperimentSpec) -> str:
    return hashlib.sha256(canonical_json(spec.to_dict()).encode()).hexdigest()


# ------------------------------------------------------------- run driver


def _load_task_data(spec: ExperimentSpec):
    if spec.task_file is not None:
        return load_spike_file(spec.task_file)
    return generate(spec.task)


def _build_simulation(spec: ExperimentSpec):
    data = _load_task_data(spec)
    master = spec.master_seed
    train, val, test = split_dataset(
        data, spec.split_fractions, substream(master, "split")
    )
    part_seed = spec.effective_partition_seed()
    shards, proportions = dirichlet_partition(
        train.labels, spec.n_clients, spec.partition_alpha,
        substream(part_seed, "partition"),
    )
    val_shards = partition_with_proportions(
        val.labels, proportions, substream(part_seed, "val_partition")
    )

    clients = []
    for k in range(spec.n_clients):
        client = ClientState(
            client_id=k, train_indices=shards[k], val_indices=val_shards[k]
        )
        if spec.dp is not None and spec.dp.enabled:
            n_k = client.n_train
            client.delta = spec.dp.delta if spec.dp.delta is not None else 1.0 / n_k
            client.sample_rate = min(1.0, spec.batch_size / n_k)
            planned_steps = spec.rounds * spec.local_epochs * max(
                1, math.ceil(n_k / spec.batch_size)
            )
            if spec.dp.sigma is not None:
                client.sigma = spec.dp.sigma
            else:
                client.sigma = calibrate_sigma(
                    spec.dp.target_epsilon, client.delta,
                    client.sample_rate, planned_steps,
                )
        clients.append(client)

    arch = NetworkArch(
        (data.spikes.shape[2], *spec.hidden_sizes, data.n_classes), spec.lif
    )
    global_params = ModelParams.init(
        arch, substream(master, "init"), w_scale=spec.w_scale
    )
    knobs = FederationKnobs(
        aggregator=spec.aggregator,
        selection=spec.selection,
        select_p=spec.select_p,
        kappa=spec.kappa,
        staleness_exponent=spec.staleness_exponent,
        rate_sigma_min=spec.rate_sigma_min,
        train_all_candidates=spec.train_all_candidates,
    )
    sim = FederatedSimulation(
        global_params=global_params,
        clients=clients,
        train_data=train,
        val_data=val,
        test_data=test,
        knobs=knobs,
        dp=spec.dp,
        batch_size=spec.batch_size,
        epochs=spec.local_epochs,
        lr=spec.lr,
        master_seed=master,
        experiment_id=spec.experiment_id,
        detach_reset=spec.detach_reset,
        eval_chunk=spec.eval_chunk,
    )
    return sim, train


def _class_histogram(labels, indices, n_classes: int):
    counts = np.bincount(np.asarray(labels)[indices], minlength=n_classes)
    return [int(c) for c in counts]


def _manifest(spec: ExperimentSpec, sim: FederatedSimulation, train) -> dict:
    return {
        "schema": 1,
        "package_version": __version__,
        "experiment_id": spec.experiment_id,
        "config_hash": config_hash(spec),
        "spec": spec.to_dict(),
        "master_seed": spec.master_seed,
        "partition_seed": spec.effective_partition_seed(),
        "n_clients": spec.n_clients,
        "n_rounds": spec.rounds,
        "aggregator": spec.aggregator,
        "selection": spec.selection,
        "dp_enabled": bool(spec.dp is not None and spec.dp.enabled),
        "clients": [
            {
                "client_id": c.client_id,
                "n_train": c.n_train,
                "n_val": c.n_val,
                "sigma": c.sigma,
                "delta": c.delta,
                "sample_rate": c.sample_rate,
                "class_histogram": _class_histogram(
                    train.labels, c.train_indices, train.n_classes
                ),
            }
            for c in sim.clients
        ],
    }


def run_experiment(spec: ExperimentSpec, sink, force: bool = False) -> Path:
    """Execute one spec end to end; returns the run directory."""
    problems = validate_spec(spec)
    if problems:
        raise ConfigError("invalid spec: " + "; ".join(problems))
    writer = RunWriter(sink, spec.experiment_id, config_hash(spec), force=force)
    sim, train = _build_simulation(spec)
    writer.write_manifest(_manifest(spec, sim, train))
    records = []
    for _ in range(spec.rounds):
        record = sim.run_round()
        writer.write_round(record)
        records.append(record)
    summary = _summary_row(spec, records, sink)
    writer.write_summary(summary)
    return writer.run_dir


def _find_run_dir(sink, experiment_id: str) -> Path:
    """Locate a completed run directory for an experiment id."""
    sink = Path(sink)
    matches = sorted(
        d for d in sink.glob(f"{experiment_id}_*")
        if d.is_dir() and (d / "manifest.json").exists()
    )
    candidates = []
    for d in matches:
        manifest, _ = load_run(d)
        if manifest.get("experiment_id") == experiment_id:
            candidates.append(d)
    if not candidates:
        raise PairingError(
            f"no completed run for reference id {experiment_id!r} under {sink}; "
            f"run it first"
        )
    if len(candidates) > 1:
        raise PairingError(
            f"reference id {experiment_id!r} is ambiguous under {sink}: "
            f"{[d.name for d in candidates]}"
        )
    return candidates[0]


def paired_metrics(spec: ExperimentSpec, sink) -> dict | None:
    """Compute RMSE / ranking / weight-deviation metrics against the
    reference run named by the spec; None when no reference is declared."""
    if spec.reference_id is None:
        return None
    ref_dir = _find_run_dir(sink, spec.reference_id)
    own_dir = Path(sink) / run_dir_name(spec.experiment_id, config_hash(spec))
    paired = PairedRuns.load(ref_dir, own_dir)
    out = {}
    for selector, label in (
        ("network_rate", "rmse_network_rate"),
        ("layer_rates", "rmse_layer_rates"),
        ("activation_sparsity", "rmse_activation_sparsity"),
        ("footprint_bytes", "rmse_footprint_bytes"),
    ):
        res = rmse_metric(paired, selector)
        out[label] = res.rmse
        out[label + "_ci95"] = res.ci95
    stab = ranking_stability(paired)
    out["kendall_tau"] = stab.mean_tau
    out["kendall_tau_ci95"] = stab.ci95
    if (
        paired.protocols_match()
        and paired.reference_manifest.get("aggregator") == "rate_weight"
    ):
        dev = lambda_deviation(paired)
        out["lambda_dev_mean"] = dev.mean
        out["lambda_dev_total"] = dev.total
        out["lambda_dev_percent"] = dev.percent
    else:
        out["lambda_dev_mean"] = None
        out["lambda_dev_total"] = None
        out["lambda_dev_percent"] = None
    return out


SUMMARY_COLUMNS = [
    "experiment_id",
    "target_epsilon",
    "clip_norm",
    "aggregator",
    "selection",
    "n_clients",
    "select_p",
    "rounds",
    "final_test_accuracy",
    "mean_network_rate",
    "realized_epsilon_max",
    "rmse_network_rate",
    "rmse_network_rate_ci95",
    "rmse_layer_rates",
    "rmse_layer_rates_ci95",
    "rmse_activation_sparsity",
    "rmse_footprint_bytes",
    "lambda_dev_mean",
    "lambda_dev_total",
    "lambda_dev_percent",
    "kendall_tau",
    "kendall_tau_ci95",
    "not_in_reference_table",
]


def _summary_row(spec: ExperimentSpec, records: list, sink) -> dict:
    dp_on = spec.dp is not None and spec.dp.enabled
    final = records[-1]
    rates = [
        c["rates"]["network"]
        for rec in records
        for c in rec["clients"]
        if c.get("trained")
    ]
    eps_values = [
        c["epsilon_spent"]
        for c in final["clients"]
        if c.get("epsilon_spent") is not None
    ]
    row = {col: None for col in SUMMARY_COLUMNS}
    row.update(
        experiment_id=spec.experiment_id,
        target_epsilon=spec.dp.target_epsilon if dp_on else None,
        clip_norm=spec.dp.clip_norm if dp_on else None,
        aggregator=spec.aggregator,
        selection=spec.selection,
        n_clients=spec.n_clients,
        select_p=spec.select_p if spec.select_p is not None else spec.n_clients,
        rounds=spec.rounds,
        final_test_accuracy=final["global"]["test_accuracy"],
        mean_network_rate=float(np.mean(rates)) if rates else None,
        realized_epsilon_max=max(eps_values) if eps_values else None,
        not_in_reference_table=spec.not_in_reference_table,
    )
    try:
        metrics = paired_metrics(spec, sink)
    except PairingError:
        metrics = None
    if metrics:
        row.update(metrics)
    return row


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def summary_csv(rows: list) -> str:
    """Fixed-column CSV for a list of summary rows (reference-table shape)."""
    lines = [",".join(SUMMARY_COLUMNS)]
    for row in rows:
        lines.append(",".join(_csv_cell(row.get(col)) for col in SUMMARY_COLUMNS))
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------- grid


def expand_grid(grid_doc: dict) -> list:
    """Expand {defaults: {...}, cells: [{...}, ...]} into full specs."""
    if not isinstance(grid_doc, dict) or "cells" not in grid_doc:
        raise ConfigError("grid file must be an object with a 'cells' list")
    defaults = grid_doc.get("defaults", {})
    if not isinstance(defaults, dict):
        raise ConfigError("grid defaults must be an object")
    specs = []
    for cell in grid_doc["cells"]:
        if not isinstance(cell, dict):
            raise ConfigError("each grid cell must be an object")
        merged = json.loads(canonical_json(defaults))
        for key, value in cell.items():
            if (
                key in merged
                and isinstance(merged[key], dict)
                and isinstance(value, dict)
            ):
                merged[key] = {**merged[key], **value}
            else:
                merged[key] = value
        specs.append(spec_from_dict(merged))
    ids = [s.experiment_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ConfigError("grid cells must have unique experiment ids")
    return specs


def _run_cell(args):
    spec_dict, sink, force = args
    spec = spec_from_dict(spec_dict)
    run_dir = run_experiment(spec, sink, force=force)
    return spec.experiment_id, str(run_dir)


def run_grid(specs: list, sink, force: bool = False, workers: int = 1) -> list:
    """Run all cells, references first, then the rest (optionally parallel).

    Returns the summary rows in grid order. Paired metrics for each cell are
    recomputed after every cell has finished, so late-finishing references
    cannot leave holes.
    """
    by_id = {s.experiment_id: s for s in specs}
    for s in specs:
        if s.reference_id is not None and s.reference_id not in by_id:
            raise ConfigError(
                f"cell {s.experiment_id!r} references {s.reference_id!r}, "
                f"which is not in the grid"
            )
    reference_ids = {s.reference_id for s in specs if s.reference_id is not None}
    first = [s for s in specs if s.experiment_id in reference_ids]
    rest = [s for s in specs if s.experiment_id not in reference_ids]

    def run_wave(wave):
        if not wave:
            return
        if workers <= 1 or len(wave) == 1:
            for s in wave:
                run_experiment(s, sink, force=force)
        else:
            jobs = [(s.to_dict(), str(sink), force) for s in wave]
            with ProcessPoolExecutor(max_workers=workers) as pool:
                list(pool.map(_run_cell, jobs))

    run_wave(first)
    run_wave(rest)

    rows = []
    for s in specs:
        run_dir = Path(sink) / run_dir_name(s.experiment_id, config_hash(s))
        _, records = load_run(run_dir)
        rows.append(_summary_row(s, records, sink))
    return rows


# -------------------------------------------------------------- plot data


def emit_plot_data(run_dirs: list, kind: str) -> str:
    """CSV blobs for downstream plotting (no rendering here).

    layer_rates_by_eps: per (experiment, client, layer) mean rate across
    rounds with the run's privacy target. client_histograms: per (experiment,
    client, class) training sample counts.
    """
    if kind == "layer_rates_by_eps":
        lines = ["experiment_id,target_epsilon,client_id,layer,mean_rate"]
        for run_dir in run_dirs:
            manifest, records = load_run(run_dir)
            eps = (manifest.get("spec", {}).get("dp") or {}).get("target_epsilon")
            if not manifest.get("dp_enabled"):
                eps = None
            sums = {}
            counts = {}
            for rec in records:
                for c in rec["clients"]:
                    if not c.get("trained"):
                        continue
                    for layer, rate in enumerate(c["rates"]["per_layer"]):
                        key = (c["client_id"], layer)
                        sums[key] = sums.get(key, 0.0) + rate
                        counts[key] = counts.get(key, 0) + 1
            for (cid, layer) in sorted(sums):
                mean = sums[(cid, layer)] / counts[(cid, layer)]
                lines.append(
                    f"{manifest['experiment_id']},{_csv_cell(eps)},{cid},{layer},{mean!r}"
                )
        return "\n".join(lines) + "\n"
    if kind == "client_histograms":
        lines = ["experiment_id,client_id,class,n_samples"]
        for run_dir in run_dirs:
            manifest, _ = load_run(run_dir)
            for client in manifest["clients"]:
                for cls, count in enumerate(client["class_histogram"]):
                    lines.append(
                        f"{manifest['experiment_id']},{client['client_id']},{cls},{count}"
                    )
        return "\n".join(lines) + "\n"
    raise ConfigError(
        f"unknown plot-data kind {kind!r}; "
        f"use 'layer_rates_by_eps' or 'client_histograms'"
    )
