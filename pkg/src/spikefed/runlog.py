"""Run-log persistence and the paired-run ablation metrics.

A run directory holds one experiment: newline-delimited round records in
`rounds.ndjson`, a `manifest.json` with the config hash and seeds, and a
`summary.json` row. Directories are keyed by (experiment id, config hash); a
second writer for the same key refuses unless forced. Nothing in a run
directory carries a timestamp, so byte-identical reruns are possible.

Metrics are pure functions of the persisted records: every number reported
for a pair of runs can be recomputed from disk bit-exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import PairingError, SinkCollisionError

__all__ = [
    "RUNLOG_SCHEMA",
    "canonical_json",
    "RunWriter",
    "load_run",
    "run_dir_name",
    "PairedRuns",
    "RmseResult",
    "LambdaDeviation",
    "KendallResult",
    "rmse_metric",
    "lambda_deviation",
    "kendall_tau",
    "kendall_tau_from_scores",
    "ranking_stability",
    "RMSE_SELECTORS",
]

RUNLOG_SCHEMA = 1
ROUNDS_FILE = "rounds.ndjson"
MANIFEST_FILE = "manifest.json"
SUMMARY_FILE = "summary.json"

RMSE_SELECTORS = ("network_rate", "layer_rates", "activation_sparsity", "footprint_bytes")


def canonical_json(obj) -> str:
    """Deterministic JSON encoding (sorted keys, no whitespace, no NaN)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def run_dir_name(experiment_id: str, config_hash: str) -> str:
    return f"{experiment_id}_{config_hash[:12]}"


class RunWriter:
    """Single-writer sink for one run directory."""

    def __init__(self, sink, experiment_id: str, config_hash: str, force: bool = False):
        self.run_dir = Path(sink) / run_dir_name(experiment_id, config_hash)
        marker = self.run_dir / MANIFEST_FILE
        if marker.exists() or (self.run_dir / ROUNDS_FILE).exists():
            if not force:
                raise SinkCollisionError(
                    f"{self.run_dir} already holds a run for this spec; "
                    f"pass force=True (--force) to overwrite"
                )
            for name in (ROUNDS_FILE, MANIFEST_FILE, SUMMARY_FILE):
                try:
                    (self.run_dir / name).unlink()
                except FileNotFoundError:
                    pass
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self._rounds_path = self.run_dir / ROUNDS_FILE

    def write_round(self, record: dict) -> None:
        with open(self._rounds_path, "a", encoding="utf-8") as fh:
            fh.write(canonical_json(record) + "\n")

    def write_manifest(self, manifest: dict) -> None:
        path = self.run_dir / MANIFEST_FILE
        path.write_text(canonical_json(manifest) + "\n", encoding="utf-8")

    def write_summary(self, summary: dict) -> None:
        path = self.run_dir / SUMMARY_FILE
        path.write_text(canonical_json(summary) + "\n", encoding="utf-8")


def load_run(run_dir):
    """Read back (manifest, round records) from a run directory."""
    run_dir = Path(run_dir)
    manifest_path = run_dir / MANIFEST_FILE
    rounds_path = run_dir / ROUNDS_FILE
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest in {run_dir}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    records = []
    if rounds_path.exists():
        with open(rounds_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(json.loads(line))
    return manifest, records


# ------------------------------------------------------------ paired runs


@dataclass
class PairedRuns:
    """A treatment run aligned to its non-DP reference by (round, client)."""

    reference_manifest: dict
    reference_records: list
    treatment_manifest: dict
    treatment_records: list

    @classmethod
    def load(cls, reference_dir, treatment_dir) -> "PairedRuns":
        ref_m, ref_r = load_run(reference_dir)
        tr_m, tr_r = load_run(treatment_dir)
        return cls(ref_m, ref_r, tr_m, tr_r)

    def __post_init__(self):
        ref_m, tr_m = self.reference_manifest, self.treatment_manifest
        if ref_m.get("dp_enabled"):
            raise PairingError("reference run must have DP disabled")
        for key in ("n_clients", "n_rounds", "partition_seed"):
            if ref_m.get(key) != tr_m.get(key):
                raise PairingError(
                    f"paired runs disagree on {key}: "
                    f"{ref_m.get(key)!r} vs {tr_m.get(key)!r}"
                )
        if len(self.reference_records) != len(self.treatment_records):
            raise PairingError(
                f"round counts differ: {len(self.reference_records)} "
                f"vs {len(self.treatment_records)}"
            )
        if not self.reference_records:
            raise PairingError("no rounds to pair")

    def protocols_match(self) -> bool:
        ref_m, tr_m = self.reference_manifest, self.treatment_manifest
        return ref_m.get("aggregator") == tr_m.get("aggregator") and ref_m.get(
            "selection"
        ) == tr_m.get("selection")

    def aligned_clients(self, ref_rec: dict, tr_rec: dict):
        """Yield (reference client entry, treatment client entry) for clients
        with full rate reports in both runs this round."""
        ref_by_id = {c["client_id"]: c for c in ref_rec["clients"] if c.get("trained")}
        tr_by_id = {c["client_id"]: c for c in tr_rec["clients"] if c.get("trained")}
        for cid in sorted(set(ref_by_id) & set(tr_by_id)):
            yield ref_by_id[cid], tr_by_id[cid]

    def rounds(self):
        return zip(self.reference_records, self.treatment_records)


# ---------------------------------------------------------------- metrics


@dataclass
class RmseResult:
    rmse: float
    ci95: float
    per_round: list
    n_pairs: int


def _client_values(entry: dict, selector: str):
    """Pull the selected rate statistic(s) from one client's round entry."""
    rates = entry["rates"]
    if selector == "network_rate":
        return [rates["network"]]
    if selector == "layer_rates":
        return list(rates["per_layer"])
    if selector == "activation_sparsity":
        return [rates["activation_sparsity"]]
    if selector == "footprint_bytes":
        return [float(rates["footprint_bytes"])]
    raise PairingError(f"unknown metric selector {selector!r}; use one of {RMSE_SELECTORS}")


def rmse_metric(paired: PairedRuns, selector: str = "network_rate") -> RmseResult:
    """RMSE of a per-client rate statistic between treatment and reference.

    The headline RMSE pools all aligned (round, client) pairs; for
    `layer_rates` the pooling is per layer and the headline is the unweighted
    mean of the per-layer RMSEs. The CI is 1.96 * std / sqrt(R) over the
    per-round values of the same statistic.
    """
    per_round = []
    diffs_by_col = None
    n_pairs = 0
    for ref_rec, tr_rec in paired.rounds():
        round_cols = None
        for ref_c, tr_c in paired.aligned_clients(ref_rec, tr_rec):
            rv = _client_values(ref_c, selector)
            tv = _client_values(tr_c, selector)
            if len(rv) != len(tv):
                raise PairingError("layer counts differ between paired runs")
            if diffs_by_col is None:
                diffs_by_col = [[] for _ in rv]
            if round_cols is None:
                round_cols = [[] for _ in rv]
            for col, (a, b) in enumerate(zip(rv, tv)):
                diffs_by_col[col].append(b - a)
                round_cols[col].append(b - a)
            n_pairs += 1
        if round_cols is not None:
            col_rmses = [
                math.sqrt(float(np.mean(np.square(col)))) for col in round_cols
            ]
            per_round.append(float(np.mean(col_rmses)))
    if n_pairs == 0:
        raise PairingError("no aligned (round, client) pairs")
    col_rmses = [math.sqrt(float(np.mean(np.square(col)))) for col in diffs_by_col]
    rmse = float(np.mean(col_rmses))
    if len(per_round) > 1:
        ci95 = float(1.96 * np.std(per_round, ddof=1) / math.sqrt(len(per_round)))
    else:
        ci95 = 0.0
    return RmseResult(rmse=rmse, ci95=ci95, per_round=per_round, n_pairs=n_pairs)


@dataclass
class LambdaDeviation:
    mean: float
    total: float
    percent: float
    n_events: int


def lambda_deviation(paired: PairedRuns) -> LambdaDeviation:
    """Absolute deviation of rate-weighted mixing weights from the reference.

    An aggregation event is a (round, client) slot where at least one of the
    two runs absorbed that client's update; the run that did not contributes
    lambda = 0 for that slot. Three conventions are emitted side by side:
    mean |dlambda| per event, the total over all events, and the total as a
    percent of the reference run's total mixing weight.
    """
    if not paired.protocols_match():
        raise PairingError("lambda deviation needs identical protocols")
    if paired.reference_manifest.get("aggregator") != "rate_weight":
        raise PairingError("lambda deviation is defined for rate_weight runs")
    deviations = []
    ref_total = 0.0
    for ref_rec, tr_rec in paired.rounds():
        ref_by_id = {c["client_id"]: c for c in ref_rec["clients"]}
        tr_by_id = {c["client_id"]: c for c in tr_rec["clients"]}
        for cid in sorted(set(ref_by_id) | set(tr_by_id)):
            ref_c = ref_by_id.get(cid)
            tr_c = tr_by_id.get(cid)
            ref_sel = bool(ref_c and ref_c.get("selected"))
            tr_sel = bool(tr_c and tr_c.get("selected"))
            if not (ref_sel or tr_sel):
                continue
            ref_lam = ref_c["lambda_weight"] if ref_sel else 0.0
            tr_lam = tr_c["lambda_weight"] if tr_sel else 0.0
            deviations.append(abs(tr_lam - ref_lam))
            ref_total += ref_lam
    if not deviations:
        raise PairingError("no aggregation events to compare")
    total = float(np.sum(deviations))
    percent = 100.0 * total / ref_total if ref_total > 0 else math.inf
    return LambdaDeviation(
        mean=total / len(deviations),
        total=total,
        percent=percent,
        n_events=len(deviations),
    )


def kendall_tau(ranking_a, ranking_b) -> float:
    """Tie-aware rank correlation of two orderings of the same client ids.

    Arguments are sequences of ids, best first. Ranks are compared pairwise;
    with no duplicate ids there are no ties, so tau_b equals plain tau.
    """
    a = list(ranking_a)
    b = list(ranking_b)
    if sorted(a) != sorted(b):
        raise PairingError("rankings must order the same id set")
    if len(set(a)) != len(a):
        raise PairingError("duplicate ids in ranking")
    if len(a) < 2:
        raise PairingError("need at least two ids to rank")
    rank_a = {cid: pos for pos, cid in enumerate(a)}
    rank_b = {cid: pos for pos, cid in enumerate(b)}
    ids = sorted(a)
    va = [rank_a[c] for c in ids]
    vb = [rank_b[c] for c in ids]
    tau, _ = stats.kendalltau(va, vb, variant="b")
    return float(tau)


def kendall_tau_from_scores(scores_a: dict, scores_b: dict) -> float:
    """Tau_b over two score maps keyed by client id (ties allowed)."""
    if set(scores_a) != set(scores_b):
        raise PairingError("score maps must cover the same id set")
    if len(scores_a) < 2:
        raise PairingError("need at least two ids to rank")
    ids = sorted(scores_a)
    tau, _ = stats.kendalltau(
        [scores_a[c] for c in ids], [scores_b[c] for c in ids], variant="b"
    )
    return float(tau)


@dataclass
class KendallResult:
    mean_tau: float
    ci95: float
    per_round: list
    n_dropped: int


def ranking_stability(paired: PairedRuns) -> KendallResult:
    """Per-round tau_b between treatment and reference client rankings.

    Rankings are by the squared class-rate change score logged for each
    trained client. Rounds where tau is undefined (fewer than two common
    clients, or a constant score vector) are dropped and counted.
    """
    taus = []
    dropped = 0
    for ref_rec, tr_rec in paired.rounds():
        ref_scores = {}
        tr_scores = {}
        for ref_c, tr_c in paired.aligned_clients(ref_rec, tr_rec):
            ref_scores[ref_c["client_id"]] = ref_c["delta_r"]
            tr_scores[tr_c["client_id"]] = tr_c["delta_r"]
        if len(ref_scores) < 2:
            dropped += 1
            continue
        tau = kendall_tau_from_scores(ref_scores, tr_scores)
        if math.isnan(tau):
            dropped += 1
            continue
        taus.append(tau)
    if not taus:
        raise PairingError("no rounds with a defined ranking correlation")
    if len(taus) > 1:
        ci95 = float(1.96 * np.std(taus, ddof=1) / math.sqrt(len(taus)))
    else:
        ci95 = 0.0
    return KendallResult(
        mean_tau=float(np.mean(taus)), ci95=ci95, per_round=taus, n_dropped=dropped
    )
