"""Federated training orchestration: partitioning, local updates, aggregation.

The simulation is synchronous-round async-flavored: every round, candidate
clients train locally from the current global model; a selection rule picks
which updates count; an aggregation rule absorbs them. Rate-weighted
aggregation applies updates sequentially (ascending client id) with a weight
built from staleness, data share, and a Gaussian kernel on the client's
validation firing rate. All randomness is drawn from substreams keyed by
(master seed, round, client, step), so results are independent of scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bptt import backward_loss
from .data import SpikeDataset
from .dp import DpConfig, dp_sgd_step, rdp_epsilon
from .errors import ConfigError, DivergenceError
from .params import ModelParams, layer_blocks
from .rates import evaluate
from .rng import substream

__all__ = [
    "ClientState",
    "LocalUpdate",
    "AggregationDecision",
    "Adam",
    "largest_remainder",
    "dirichlet_partition",
    "partition_with_proportions",
    "fedavg",
    "rate_weight",
    "async_weight",
    "delta_r_select",
    "delta_r_distance",
    "local_train",
    "FederatedSimulation",
]

AGGREGATORS = ("fedavg", "rate_weight")
SELECTIONS = ("all", "delta_r")


# ------------------------------------------------------------- partitioning


def largest_remainder(weights, total: int) -> np.ndarray:
    """Apportion `total` items proportionally to `weights` (ties to lower index)."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.sum() <= 0:
        raise ConfigError("weights must have positive sum")
    quotas = weights / weights.sum() * total
    counts = np.floor(quotas).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        remainders = quotas - counts
        # stable argsort descending; ties resolve to the lower index
        order = np.argsort(-remainders, kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(
    labels,
    n_clients: int,
    alpha: float,
    rng: np.random.Generator,
    max_retries: int = 100,
):
    """Label-skewed shards: per class, client shares drawn from Dir(alpha).

    Returns (shards, proportions) with shards a list of sorted index arrays
    and proportions the (n_classes, n_clients) draw actually used. Redraws the
    whole assignment (bounded) if any client would end up empty.
    """
    labels = np.asarray(labels)
    if n_clients < 1:
        raise ConfigError("need at least one client")
    if alpha <= 0:
        raise ConfigError("alpha must be positive")
    classes = np.unique(labels)
    if len(labels) < n_clients:
        raise ConfigError("fewer samples than clients")

    for _ in range(max_retries):
        proportions = rng.dirichlet(np.full(n_clients, alpha), size=len(classes))
        shards = [[] for _ in range(n_clients)]
        for ci, c in enumerate(classes):
            idx = rng.permutation(np.flatnonzero(labels == c))
            counts = largest_remainder(proportions[ci], len(idx))
            lo = 0
            for k in range(n_clients):
                shards[k].append(idx[lo : lo + counts[k]])
                lo += counts[k]
        sizes = [sum(len(part) for part in shard) for shard in shards]
        if min(sizes) >= 1:
            return (
                [np.sort(np.concatenate(shard)) for shard in shards],
                proportions,
            )
    raise ConfigError(
        f"could not give every client >= 1 sample after {max_retries} draws; "
        f"raise alpha or lower n_clients"
    )


def partition_with_proportions(labels, proportions, rng: np.random.Generator):
    """Shard a second set with an existing per-class proportion matrix (used to
    split validation data 'like' the training data)."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if proportions.shape[0] != len(classes):
        raise ConfigError("proportion matrix does not match the class count")
    n_clients = proportions.shape[1]
    shards = [[] for _ in range(n_clients)]
    for ci, c in enumerate(classes):
        idx = rng.permutation(np.flatnonzero(labels == c))
        counts = largest_remainder(proportions[ci], len(idx))
        lo = 0
        for k in range(n_clients):
            shards[k].append(idx[lo : lo + counts[k]])
            lo += counts[k]
    return [np.sort(np.concatenate(shard)) for shard in shards]


# ---------------------------------------------------------------- optimizer


class Adam:
    """Standard Adam on a flat vector; moments live for one federated round."""

    def __init__(self, dim: int, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0

    def update(self, grad: np.ndarray) -> np.ndarray:
        """Return the increment to subtract from the parameters."""
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# -------------------------------------------------------------- aggregation


def fedavg(param_vectors, n_samples) -> np.ndarray:
    """Data-size-weighted mean of parameter vectors.

    Anchored at the first vector (theta_1 + sum w_k (theta_k - theta_1)) so
    aggregating identical inputs returns them bit-exactly; the result matches
    the naive weighted mean to float rounding.
    """
    vectors = [np.asarray(v, dtype=np.float64) for v in param_vectors]
    n_samples = np.asarray(n_samples, dtype=np.float64)
    if len(vectors) == 0:
        raise ConfigError("nothing to aggregate")
    if len(vectors) != n_samples.size:
        raise ConfigError("one sample count per update")
    if n_samples.min() <= 0:
        raise ConfigError("sample counts must be positive")
    weights = n_samples / n_samples.sum()
    out = vectors[0].copy()
    for w, vec in zip(weights, vectors):
        out += w * (vec - vectors[0])
    return out


def rate_weight(rates, sigma_min: float = 1e-4):
    """Gaussian kernel scores of client rates around the cohort mean.

    Returns (zetas, mu, sigma) with sigma the population std floored at
    sigma_min. Scores peak for clients whose rate sits nearest the mean.
    """
    rates = np.asarray(rates, dtype=np.float64)
    if rates.size == 0:
        raise ConfigError("no rates to score")
    if sigma_min <= 0:
        raise ConfigError("sigma_min must be positive")
    mu = float(rates.mean())
    sigma = max(float(rates.std()), sigma_min)
    zetas = np.exp(-((rates - mu) ** 2) / (2 * sigma**2)) / (
        math.sqrt(2 * math.pi) * sigma
    )
    return zetas, mu, sigma


@dataclass
class AggregationDecision:
    """Why one client update was absorbed with the weight it got."""

    client_id: int
    lambda_weight: float
    raw_lambda: float
    clamped: bool
    staleness: int
    staleness_factor: float
    data_share: float
    zeta: float


def async_weight(
    zeta: float,
    staleness: int,
    data_share: float,
    kappa: float = 1.0,
    staleness_exponent: float = 0.5,
) -> AggregationDecision:
    """Mixing weight lambda = clamp(kappa * staleness_factor * share * zeta)."""
    if staleness < 0:
        raise ConfigError("staleness must be >= 0")
    if not 0.0 <= data_share <= 1.0:
        raise ConfigError("data share must lie in [0,1]")
    staleness_factor = (staleness + 1.0) ** (-staleness_exponent)
    raw = kappa * staleness_factor * data_share * zeta
    lam = min(max(raw, 0.0), 1.0)
    return AggregationDecision(
        client_id=-1,
        lambda_weight=lam,
        raw_lambda=raw,
        clamped=raw > 1.0 or raw < 0.0,
        staleness=staleness,
        staleness_factor=staleness_factor,
        data_share=data_share,
        zeta=zeta,
    )


def delta_r_distance(before_per_class, after_per_class) -> float:
    """Squared L2 distance between per-class rate vectors; classes absent on
    the client (None on either side) contribute zero."""
    if len(before_per_class) != len(after_per_class):
        raise ConfigError("per-class vectors must align")
    total = 0.0
    for b, a in zip(before_per_class, after_per_class):
        if b is None or a is None:
            continue
        total += (a - b) ** 2
    return float(total)


def delta_r_select(delta_rs: dict, top_p: int):
    """Top-P client ids by Delta-R descending, ties to the lower id.

    Returns (selected_ids, tie_broken) where tie_broken marks whether the
    cutoff involved equal scores.
    """
    if top_p < 1:
        raise ConfigError("top_p must be >= 1")
    items = sorted(delta_rs.items(), key=lambda kv: (-kv[1], kv[0]))
    selected = [cid for cid, _ in items[:top_p]]
    tie_broken = False
    if len(items) > top_p:
        cutoff = items[top_p - 1][1]
        tie_broken = any(score == cutoff for _, score in items[top_p:])
    return selected, tie_broken


# ------------------------------------------------------------ local update


@dataclass
class ClientState:
    """Server-side view of one client."""

    client_id: int
    train_indices: np.ndarray
    val_indices: np.ndarray
    staleness: int = 0
    steps_total: int = 0
    sigma: float | None = None
    delta: float | None = None
    sample_rate: float | None = None
    last_delta_r: float = math.inf

    @property
    def n_train(self) -> int:
        return len(self.train_indices)

    @property
    def n_val(self) -> int:
        return len(self.val_indices)


@dataclass
class LocalUpdate:
    """Result of one client's local training pass."""

    client_id: int
    params: ModelParams
    steps: int
    skipped_empty_batches: int
    mean_clipped_fraction: float
    report: object  # RateReport on the validation shard
    val_accuracy: float
    train_accuracy: float
    delta_r: float


def local_train(
    global_params: ModelParams,
    client: ClientState,
    train_data: SpikeDataset,
    val_before_per_class,
    *,
    batch_size: int,
    epochs: int,
    lr: float,
    dp: DpConfig | None,
    master_seed: int,
    round_idx: int,
    val_data: SpikeDataset,
    detach_reset: bool = True,
    eval_chunk: int = 256,
) -> LocalUpdate:
    """Train a copy of the global model on one client's shard.

    Optimizer moments are fresh each round. Under DP, steps use literal
    Poisson subsampling, per-sample clipping, and Gaussian noise before the
    Adam update; empty realized batches are skipped and counted. Raises
    DivergenceError on non-finite loss or parameters.
    """
    if batch_size < 1 or epochs < 0:
        raise ConfigError("batch_size must be >= 1 and epochs >= 0")
    params = global_params.copy()
    opt = Adam(params.dim, lr=lr)
    mask = params.trainable_mask()
    blocks = layer_blocks(params.arch)
    spikes = train_data.spikes.astype(np.float64)
    labels = train_data.labels
    n = len(labels)
    steps_per_epoch = max(1, math.ceil(n / batch_size))

    steps_done = 0
    skipped = 0
    clip_fracs = []
    for epoch in range(epochs):
        if dp is not None and dp.enabled and dp.poisson:
            q = client.sample_rate
            for step in range(steps_per_epoch):
                sel_rng = substream(master_seed, "poisson", round_idx, client.client_id, epoch, step)
                take = sel_rng.random(n) < q
                if not take.any():
                    skipped += 1
                    continue
                out = backward_loss(
                    params, spikes[take], labels[take],
                    mode="spiking", detach_reset=detach_reset, per_sample=True,
                )
                if not np.isfinite(out.loss):
                    raise DivergenceError(
                        f"client {client.client_id} diverged at round {round_idx} "
                        f"step {steps_done} (loss={out.loss})"
                    )
                noise_rng = substream(master_seed, "dpnoise", round_idx, client.client_id, epoch, step)
                noisy, summary = dp_sgd_step(
                    out.per_sample, dp.clip_norm, client.sigma, noise_rng,
                    clip_mode=dp.clip_mode,
                    blocks=blocks if dp.clip_mode == "per_layer" else None,
                )
                params.vector -= opt.update(noisy) * mask
                clip_fracs.append(summary.clipped_fraction)
                steps_done += 1
        else:
            order_rng = substream(master_seed, "shuffle", round_idx, client.client_id, epoch)
            order = order_rng.permutation(n)
            fixed_dp = dp is not None and dp.enabled  # fixed-batch debug mode
            for lo in range(0, n, batch_size):
                batch = order[lo : lo + batch_size]
                out = backward_loss(
                    params, spikes[batch], labels[batch],
                    mode="spiking", detach_reset=detach_reset,
                    per_sample=fixed_dp,
                )
                if not np.isfinite(out.loss):
                    raise DivergenceError(
                        f"client {client.client_id} diverged at round {round_idx} "
                        f"step {steps_done} (loss={out.loss})"
                    )
                if fixed_dp:
                    noise_rng = substream(master_seed, "dpnoise", round_idx, client.client_id, epoch, lo)
                    grad, summary = dp_sgd_step(
                        out.per_sample, dp.clip_norm, client.sigma, noise_rng,
                        clip_mode=dp.clip_mode,
                        blocks=blocks if dp.clip_mode == "per_layer" else None,
                    )
                    clip_fracs.append(summary.clipped_fraction)
                else:
                    grad = out.batch_grad
                params.vector -= opt.update(grad) * mask
                steps_done += 1
        if not params.finite():
            raise DivergenceError(
                f"client {client.client_id} parameters non-finite at round {round_idx}"
            )

    report, val_acc = evaluate(
        params, val_data.spikes, val_data.labels, val_data.n_classes, chunk=eval_chunk
    )
    _, train_acc = evaluate(
        params, train_data.spikes, train_data.labels, train_data.n_classes,
        chunk=eval_chunk,
    )
    delta_r = delta_r_distance(val_before_per_class, report.per_class)
    return LocalUpdate(
        client_id=client.client_id,
        params=params,
        steps=steps_done,
        skipped_empty_batches=skipped,
        mean_clipped_fraction=float(np.mean(clip_fracs)) if clip_fracs else 0.0,
        report=report,
        val_accuracy=val_acc,
        train_accuracy=train_acc,
        delta_r=delta_r,
    )


# ---------------------------------------------------------------- simulator


@dataclass
class FederationKnobs:
    """Protocol settings for the round loop."""

    aggregator: str = "fedavg"
    selection: str = "all"
    select_p: int | None = None
    kappa: float = 1.0
    staleness_exponent: float = 0.5
    rate_sigma_min: float = 1e-4
    train_all_candidates: bool = True

    def validate(self, n_clients: int) -> None:
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"aggregator must be one of {AGGREGATORS}")
        if self.selection not in SELECTIONS:
            raise ConfigError(f"selection must be one of {SELECTIONS}")
        p = self.select_p if self.select_p is not None else n_clients
        if not 1 <= p <= n_clients:
            raise ConfigError(f"select_p must lie in [1, {n_clients}]")


class FederatedSimulation:
    """Owns the global model and client states; advances one round at a time."""

    def __init__(
        self,
        *,
        global_params: ModelParams,
        clients: list,
        train_data: SpikeDataset,
        val_data: SpikeDataset,
        test_data: SpikeDataset,
        knobs: FederationKnobs,
        dp: DpConfig | None,
        batch_size: int,
        epochs: int,
        lr: float,
        master_seed: int,
        experiment_id: str = "run",
        detach_reset: bool = True,
        eval_chunk: int = 256,
    ):
        knobs.validate(len(clients))
        self.global_params = global_params
        self.clients = sorted(clients, key=lambda c: c.client_id)
        self._by_id = {c.client_id: c for c in self.clients}
        if len(self._by_id) != len(self.clients):
            raise ConfigError("duplicate client ids")
        self.train_data = train_data
        self.val_data = val_data
        self.test_data = test_data
        self.knobs = knobs
        self.dp = dp
        self.batch_size = batch_size
        self.epochs = epochs
        self.lr = lr
        self.master_seed = master_seed
        self.experiment_id = experiment_id
        self.detach_reset = detach_reset
        self.eval_chunk = eval_chunk
        self.round_idx = 0

    def _dp_enabled(self) -> bool:
        return self.dp is not None and self.dp.enabled

    def _client_subsets(self, client: ClientState):
        return (
            self.train_data.subset(client.train_indices),
            self.val_data.subset(client.val_indices),
        )

    def run_round(self) -> dict:
        """Advance one federated round and return its log record."""
        knobs = self.knobs
        r = self.round_idx
        p = knobs.select_p if knobs.select_p is not None else len(self.clients)

        # -------- choose who trains this round
        if knobs.selection == "delta_r" and not knobs.train_all_candidates:
            stale_scores = {c.client_id: c.last_delta_r for c in self.clients}
            pre_selected, _ = delta_r_select(stale_scores, p)
            to_train = [c for c in self.clients if c.client_id in pre_selected]
        else:
            to_train = list(self.clients)

        # -------- local training (and divergence handling)
        updates = {}
        diverged = {}
        for client in to_train:
            train_sub, val_sub = self._client_subsets(client)
            before_report, _ = evaluate(
                self.global_params, val_sub.spikes, val_sub.labels,
                val_sub.n_classes, chunk=self.eval_chunk,
            )
            try:
                upd = local_train(
                    self.global_params, client, train_sub, before_report.per_class,
                    batch_size=self.batch_size, epochs=self.epochs, lr=self.lr,
                    dp=self.dp, master_seed=self.master_seed, round_idx=r,
                    val_data=val_sub, detach_reset=self.detach_reset,
                    eval_chunk=self.eval_chunk,
                )
            except DivergenceError as err:
                diverged[client.client_id] = str(err)
                continue
            updates[client.client_id] = upd
            client.steps_total += upd.steps
            client.last_delta_r = upd.delta_r

        # -------- selection among trained candidates
        if knobs.selection == "delta_r":
            scores = {cid: upd.delta_r for cid, upd in updates.items()}
            if scores:
                selected_ids, tie_broken = delta_r_select(scores, min(p, len(scores)))
            else:
                selected_ids, tie_broken = [], False
        else:
            selected_ids, tie_broken = sorted(updates.keys()), False
        selected_ids = sorted(selected_ids)

        # -------- aggregation
        lambda_by_client = {}
        zeta_by_client = {}
        decisions = []
        if selected_ids:
            sizes = np.array(
                [self._by_id[cid].n_train for cid in selected_ids], dtype=np.float64
            )
            if knobs.aggregator == "fedavg":
                new_vec = fedavg(
                    [updates[cid].params.vector for cid in selected_ids], sizes
                )
                self.global_params = self.global_params.with_vector(new_vec)
                for cid, w in zip(selected_ids, sizes / sizes.sum()):
                    lambda_by_client[cid] = float(w)
            else:
                rates = np.array(
                    [updates[cid].report.network for cid in selected_ids]
                )
                zetas, _, _ = rate_weight(rates, knobs.rate_sigma_min)
                shares = sizes / sizes.sum()
                vec = self.global_params.vector.copy()
                for cid, zeta, share in zip(selected_ids, zetas, shares):
                    decision = async_weight(
                        float(zeta), self._by_id[cid].staleness, float(share),
                        kappa=knobs.kappa,
                        staleness_exponent=knobs.staleness_exponent,
                    )
                    decision.client_id = cid
                    lam = decision.lambda_weight
                    vec = (1.0 - lam) * vec + lam * updates[cid].params.vector
                    lambda_by_client[cid] = lam
                    zeta_by_client[cid] = float(zeta)
                    decisions.append(decision)
                self.global_params = self.global_params.with_vector(vec)

        # -------- staleness bookkeeping
        applied = set(selected_ids)
        for client in self.clients:
            if client.client_id in applied:
                client.staleness = 0
            else:
                client.staleness += 1

        # -------- global evaluation
        test_report, test_acc = evaluate(
            self.global_params, self.test_data.spikes, self.test_data.labels,
            self.test_data.n_classes, chunk=self.eval_chunk,
        )

        record = {
            "schema": 1,
            "experiment_id": self.experiment_id,
            "round": r,
            "aggregator": knobs.aggregator,
            "selection": knobs.selection,
            "detach_reset": self.detach_reset,
            "tie_broken": bool(tie_broken),
            "global": {
                "test_accuracy": float(test_acc),
                "test_rates": test_report.flat_record(),
                "params_norm": float(np.linalg.norm(self.global_params.vector)),
            },
            "clients": [],
        }
        for client in self.clients:
            cid = client.client_id
            entry = {
                "client_id": cid,
                "n_train": client.n_train,
                "n_val": client.n_val,
                "trained": cid in updates,
                "selected": cid in applied,
                "staleness": client.staleness,
                "steps_total": client.steps_total,
                "lambda_weight": lambda_by_client.get(cid, 0.0),
                "zeta": zeta_by_client.get(cid),
                "diverged": diverged.get(cid),
            }
            if self._dp_enabled():
                entry.update(
                    sigma=client.sigma,
                    delta=client.delta,
                    sample_rate=client.sample_rate,
                    epsilon_spent=(
                        rdp_epsilon(
                            client.sigma, client.sample_rate,
                            client.steps_total, client.delta,
                        )
                        if client.steps_total > 0
                        else 0.0
                    ),
                )
            else:
                entry.update(sigma=None, delta=None, sample_rate=None, epsilon_spent=None)
            if cid in updates:
                upd = updates[cid]
                entry.update(
                    steps_this_round=upd.steps,
                    skipped_empty_batches=upd.skipped_empty_batches,
                    clipped_fraction=upd.mean_clipped_fraction,
                    delta_r=upd.delta_r,
                    train_accuracy=upd.train_accuracy,
                    val_accuracy=upd.val_accuracy,
                    rates=upd.report.flat_record(),
                )
            record["clients"].append(entry)

        self.round_idx += 1
        return record
