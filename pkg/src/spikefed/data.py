"""Synthetic spike-train classification task and the packed spike-file format.

Each class drives a short contiguous block of input channels (wrapping at the
channel count, so neighboring classes overlap) at a high Bernoulli rate while
the remaining channels tick at a low background rate. Rates are jittered per
sample. The task is intentionally easy: a count-based readout separates it,
which makes end-to-end training gates meaningful at desk scale.

File format (little-endian):
    magic  4s   = b"SPKD"
    version u16 = 1
    n_samples, t_steps, n_channels, n_classes: u32 each
    payload: bit-packed spikes, C-order over (sample, time, channel)
    labels: u16 per sample
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SpikeFileError
from .rng import substream

__all__ = [
    "TaskSpec",
    "SpikeDataset",
    "class_template",
    "generate",
    "split_dataset",
    "save_spike_file",
    "load_spike_file",
]

MAGIC = b"SPKD"
VERSION = 1
HEADER = struct.Struct("<4sHIIII")


@dataclass(frozen=True)
class TaskSpec:
    """Generator settings for the synthetic task."""

    n_classes: int = 10
    n_channels: int = 20
    t_steps: int = 200
    samples_per_class: int = 300
    base_rate: float = 0.02
    signal_rate: float = 0.35
    jitter: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        if self.n_channels < 1 or self.t_steps < 1 or self.samples_per_class < 1:
            raise ConfigError("counts must be positive")
        for name in ("base_rate", "signal_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0,1]")
        if self.jitter < 0:
            raise ConfigError("jitter must be >= 0")

    def to_dict(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "n_channels": self.n_channels,
            "t_steps": self.t_steps,
            "samples_per_class": self.samples_per_class,
            "base_rate": self.base_rate,
            "signal_rate": self.signal_rate,
            "jitter": self.jitter,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        spec = cls(**d)
        spec.validate()
        return spec


@dataclass
class SpikeDataset:
    """(N, T, C) binary spike tensor with integer labels."""

    spikes: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __len__(self) -> int:
        return self.spikes.shape[0]

    @property
    def t_steps(self) -> int:
        return self.spikes.shape[1]

    @property
    def n_channels(self) -> int:
        return self.spikes.shape[2]

    def subset(self, indices) -> "SpikeDataset":
        indices = np.asarray(indices)
        return SpikeDataset(self.spikes[indices], self.labels[indices], self.n_classes)


def class_template(task: TaskSpec, class_id: int, offset: int) -> np.ndarray:
    """Signal channel indices for one class: a wrapped contiguous block."""
    width = math.ceil(task.n_channels / task.n_classes) + 2
    stride = task.n_channels // task.n_classes
    start = offset + class_id * stride
    return np.array([(start + i) % task.n_channels for i in range(width)])


def generate(task: TaskSpec) -> SpikeDataset:
    """Draw the full labeled dataset for a task spec (deterministic in seed)."""
    task.validate()
    rng = substream(task.seed, "taskgen")
    offset = int(rng.integers(task.n_channels))

    n_total = task.n_classes * task.samples_per_class
    spikes = np.zeros((n_total, task.t_steps, task.n_channels), dtype=np.uint8)
    labels = np.zeros(n_total, dtype=np.int64)
    i = 0
    for c in range(task.n_classes):
        template = class_template(task, c, offset)
        for _ in range(task.samples_per_class):
            sig = float(np.clip(task.signal_rate + rng.normal(0, task.jitter), 0, 1))
            base = float(np.clip(task.base_rate + rng.normal(0, task.jitter), 0, 1))
            probs = np.full(task.n_channels, base)
            probs[template] = sig
            spikes[i] = rng.random((task.t_steps, task.n_channels)) < probs
            labels[i] = c
            i += 1
    return SpikeDataset(spikes, labels, task.n_classes)


def split_dataset(dataset: SpikeDataset, fractions, rng: np.random.Generator):
    """Stratified shuffle-split into len(fractions) parts (last takes the rest)."""
    fractions = tuple(fractions)
    if not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ConfigError(f"fractions must sum to 1, got {fractions}")
    parts = [[] for _ in fractions]
    for c in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.labels == c)
        idx = rng.permutation(idx)
        cuts = [int(round(sum(fractions[: k + 1]) * len(idx))) for k in range(len(fractions))]
        lo = 0
        for k, hi in enumerate(cuts):
            parts[k].append(idx[lo:hi])
            lo = hi
    out = []
    for chunk_list in parts:
        merged = np.sort(np.concatenate(chunk_list))
        out.append(dataset.subset(merged))
    return tuple(out)


# ----------------------------------------------------------------- file io


def save_spike_file(path, dataset: SpikeDataset) -> None:
    """Write the packed binary format described in the module docstring."""
    spikes = np.asarray(dataset.spikes)
    labels = np.asarray(dataset.labels)
    if spikes.ndim != 3:
        raise ConfigError("spikes must be (N, T, C)")
    if not np.isin(spikes, (0, 1)).all():
        raise ConfigError("spikes must be binary")
    if labels.min() < 0 or labels.max() >= dataset.n_classes:
        raise ConfigError("labels out of range")
    n, t, c = spikes.shape
    header = HEADER.pack(MAGIC, VERSION, n, t, c, dataset.n_classes)
    payload = np.packbits(spikes.astype(np.uint8).reshape(-1))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())
        fh.write(labels.astype("<u2").tobytes())


def load_spike_file(path) -> SpikeDataset:
    """Read and validate a spike file; raises SpikeFileError with the failing
    region (header / payload truncation with byte offset / label range)."""
    with open(path, "rb") as fh:
        blob = fh.read()

    if len(blob) < HEADER.size:
        raise SpikeFileError(
            f"header truncated: need {HEADER.size} bytes, file has {len(blob)}"
        )
    magic, version, n, t, c, n_classes = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise SpikeFileError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise SpikeFileError(f"unsupported version {version}, expected {VERSION}")
    if min(n, t, c, n_classes) < 1:
        raise SpikeFileError(f"degenerate header counts: N={n} T={t} C={c} K={n_classes}")

    n_bits = n * t * c
    payload_bytes = (n_bits + 7) // 8
    label_bytes = 2 * n
    expect = HEADER.size + payload_bytes + label_bytes
    if len(blob) < HEADER.size + payload_bytes:
        raise SpikeFileError(
            f"payload truncated at byte offset {len(blob)} "
            f"(need {HEADER.size + payload_bytes})"
        )
    if len(blob) < expect:
        raise SpikeFileError(
            f"label block truncated at byte offset {len(blob)} (need {expect})"
        )
    if len(blob) > expect:
        raise SpikeFileError(
            f"{len(blob) - expect} trailing bytes after byte offset {expect}"
        )

    payload = np.frombuffer(blob, dtype=np.uint8, count=payload_bytes, offset=HEADER.size)
    bits = np.unpackbits(payload, count=n_bits)
    spikes = bits.reshape(n, t, c).astype(np.uint8)
    labels = np.frombuffer(blob, dtype="<u2", count=n, offset=HEADER.size + payload_bytes)
    labels = labels.astype(np.int64)
    if labels.size and labels.max() >= n_classes:
        bad = int(np.argmax(labels >= n_classes))
        raise SpikeFileError(
            f"label {int(labels[bad])} at sample {bad} outside [0, {n_classes})"
        )
    return SpikeDataset(spikes, labels, int(n_classes))
