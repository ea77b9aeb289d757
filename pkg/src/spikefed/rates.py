"""Firing-rate, sparsity, and footprint metrics.

All rates are empirical spike densities over (batch, time, neurons). The
network rate weights layers by neuron count, so it equals total spikes over
total neuron-steps across the LIF layers (inputs are data, not activity, and
are excluded throughout). Evaluation streams over the dataset in chunks so
trace memory stays bounded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .lif import forward
from .params import ModelParams

__all__ = [
    "RateReport",
    "layer_rate",
    "network_rate",
    "activation_sparsity",
    "footprint_bytes",
    "evaluate",
]

# fixed per-segment descriptor cost in the footprint model: segment id, two
# dims, and a payload count, 4 bytes each
SEGMENT_HEADER_BYTES = 16
PAYLOAD_BYTES_PER_ENTRY = 4


@dataclass
class RateReport:
    """Rate profile of one model on one labeled evaluation set."""

    per_neuron: list  # per LIF layer, (n_ell,) mean spike rate
    per_layer: list  # per LIF layer, scalar rate
    network: float
    per_class: list  # per class, network rate over that class's samples; None if absent
    activation_sparsity: float
    footprint_bytes: int

    def flat_record(self) -> dict:
        """Flat JSON-ready view (per-neuron vectors omitted for size)."""
        return {
            "per_layer": [float(r) for r in self.per_layer],
            "network": float(self.network),
            "per_class": [None if r is None else float(r) for r in self.per_class],
            "activation_sparsity": float(self.activation_sparsity),
            "footprint_bytes": int(self.footprint_bytes),
        }


def layer_rate(spikes) -> float:
    """Mean spike density of one layer's (B, T, n) spike tensor."""
    spikes = np.asarray(spikes)
    if spikes.size == 0:
        raise ConfigError("empty spike tensor has no rate")
    return float(spikes.mean())


def network_rate(per_layer_rates, layer_sizes) -> float:
    """Neuron-count-weighted mean of per-layer rates."""
    rates = np.asarray(per_layer_rates, dtype=np.float64)
    sizes = np.asarray(layer_sizes, dtype=np.float64)
    if rates.shape != sizes.shape:
        raise ConfigError("per-layer rates and sizes must align")
    return float((rates * sizes).sum() / sizes.sum())


def activation_sparsity(total_spikes: float, total_slots: float) -> float:
    """1 - spike density over all LIF neuron-steps."""
    if total_slots <= 0:
        raise ConfigError("no neuron-steps to measure sparsity over")
    return float(1.0 - total_spikes / total_slots)


def footprint_bytes(params: ModelParams, threshold: float = 1e-6) -> int:
    """Deployment-style payload size: 4 bytes per parameter entry with
    magnitude above `threshold`, plus a fixed descriptor per segment.

    threshold=0 counts exact nonzeros.
    """
    if threshold < 0:
        raise ConfigError("threshold must be >= 0")
    total = 0
    for _, sl, _ in params.segment_items():
        seg = params.vector[sl]
        total += SEGMENT_HEADER_BYTES
        total += PAYLOAD_BYTES_PER_ENTRY * int((np.abs(seg) > threshold).sum())
    return total


def evaluate(
    params: ModelParams,
    spikes,
    labels,
    n_classes: int,
    chunk: int = 256,
    footprint_threshold: float = 1e-6,
):
    """Stream the evaluation set and return (RateReport, accuracy).

    Argmax ties resolve to the lowest class id (np.argmax convention), which
    keeps evaluation deterministic.
    """
    spikes = np.asarray(spikes)
    labels = np.asarray(labels)
    if spikes.shape[0] == 0:
        raise ConfigError("empty evaluation set")
    if spikes.shape[0] != labels.shape[0]:
        raise ConfigError("spikes and labels disagree on sample count")

    arch = params.arch
    sizes = arch.layer_sizes[1:]
    t_steps = spikes.shape[1]
    n_samples = spikes.shape[0]

    neuron_sums = [np.zeros(n) for n in sizes]
    class_layer_sums = np.zeros((n_classes, len(sizes)))
    class_counts = np.zeros(n_classes, dtype=np.int64)
    correct = 0

    for lo in range(0, n_samples, chunk):
        hi = min(lo + chunk, n_samples)
        batch = spikes[lo:hi].astype(np.float64)
        batch_labels = labels[lo:hi]
        traces, logits = forward(params, batch, arch, mode="spiking")
        preds = np.argmax(logits, axis=1)
        correct += int((preds == batch_labels).sum())
        for li, trace in enumerate(traces):
            neuron_sums[li] += trace.spikes.sum(axis=(0, 1))
            per_sample = trace.spikes.sum(axis=(1, 2))  # spikes per sample
            np.add.at(class_layer_sums[:, li], batch_labels, per_sample)
        np.add.at(class_counts, batch_labels, 1)

    per_neuron = [
        sums / (n_samples * t_steps) for sums in neuron_sums
    ]
    per_layer = [float(v.mean()) for v in per_neuron]
    net = network_rate(per_layer, sizes)

    total_neurons = sum(sizes)
    per_class = []
    for c in range(n_classes):
        if class_counts[c] == 0:
            per_class.append(None)
        else:
            slots = class_counts[c] * t_steps * total_neurons
            per_class.append(float(class_layer_sums[c].sum() / slots))

    total_spikes = float(sum(s.sum() for s in neuron_sums))
    sparsity = activation_sparsity(
        total_spikes, n_samples * t_steps * total_neurons
    )
    report = RateReport(
        per_neuron=per_neuron,
        per_layer=per_layer,
        network=net,
        per_class=per_class,
        activation_sparsity=sparsity,
        footprint_bytes=footprint_bytes(params, footprint_threshold),
    )
    return report, correct / n_samples
