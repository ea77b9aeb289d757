"""Flat parameter store with a per-layer segment layout.

All training math (clipping, noising, aggregation, optimizer steps) operates on
one float64 vector; the layout maps named segments (weights, bias, decay per
layer) onto contiguous slices so layer views are zero-copy. Segments are
ordered layer-major, which makes each layer a single contiguous block — the
per-layer clipping mode relies on that.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .lif import NetworkArch, raw_from_beta

__all__ = ["ModelParams", "layer_blocks"]


def _build_layout(arch: NetworkArch):
    sizes = arch.layer_sizes
    segments = {}
    offset = 0
    for ell in range(1, len(sizes)):
        n, m = sizes[ell], sizes[ell - 1]
        segments[("w", ell)] = (slice(offset, offset + n * m), (n, m))
        offset += n * m
        segments[("b", ell)] = (slice(offset, offset + n), (n,))
        offset += n
        segments[("beta", ell)] = (slice(offset, offset + 1), (1,))
        offset += 1
    return segments, offset


def layer_blocks(arch: NetworkArch):
    """Contiguous (start, stop) slice per LIF layer over the flat vector."""
    segments, _ = _build_layout(arch)
    blocks = []
    for ell in range(1, arch.n_layers + 1):
        start = segments[("w", ell)][0].start
        stop = segments[("beta", ell)][0].stop
        blocks.append(slice(start, stop))
    return blocks


@dataclass
class ModelParams:
    """Parameters of a dense LIF stack, stored as one flat float64 vector."""

    arch: NetworkArch
    vector: np.ndarray

    def __post_init__(self):
        self._segments, self._dim = _build_layout(self.arch)
        if self.vector.shape != (self._dim,):
            raise ConfigError(
                f"vector has shape {self.vector.shape}, layout needs ({self._dim},)"
            )
        if self.vector.dtype != np.float64:
            self.vector = self.vector.astype(np.float64)

    # ------------------------------------------------------------------ init

    @classmethod
    def init(cls, arch: NetworkArch, rng: np.random.Generator, w_scale: float = 1.0):
        """Fresh parameters: N(0, (w_scale/sqrt(fan_in))^2) weights, zero
        biases, decay at the configured beta_init."""
        arch.validate()
        segments, dim = _build_layout(arch)
        vec = np.zeros(dim)
        params = cls(arch, vec)
        raw0 = raw_from_beta(arch.lif.beta_init)
        for ell in range(1, arch.n_layers + 1):
            n, m = arch.layer_sizes[ell], arch.layer_sizes[ell - 1]
            params.weights(ell)[:] = rng.normal(0.0, w_scale / np.sqrt(m), size=(n, m))
            params.beta_raw(ell)[:] = raw0
        return params

    @classmethod
    def zeros(cls, arch: NetworkArch):
        """All-zero weights/biases with decay at beta_init (cold start)."""
        arch.validate()
        _, dim = _build_layout(arch)
        params = cls(arch, np.zeros(dim))
        raw0 = raw_from_beta(arch.lif.beta_init)
        for ell in range(1, arch.n_layers + 1):
            params.beta_raw(ell)[:] = raw0
        return params

    # ----------------------------------------------------------------- views

    @property
    def dim(self) -> int:
        return self._dim

    def weights(self, ell: int) -> np.ndarray:
        sl, shape = self._segments[("w", ell)]
        return self.vector[sl].reshape(shape)

    def bias(self, ell: int) -> np.ndarray:
        sl, _ = self._segments[("b", ell)]
        return self.vector[sl]

    def beta_raw(self, ell: int) -> np.ndarray:
        sl, _ = self._segments[("beta", ell)]
        return self.vector[sl]

    def beta_raw_vector(self) -> np.ndarray:
        return np.array(
            [self.beta_raw(ell)[0] for ell in range(1, self.arch.n_layers + 1)]
        )

    def segment_items(self):
        """Yield (name, slice, shape) in layout order."""
        for key, (sl, shape) in self._segments.items():
            yield key, sl, shape

    def trainable_mask(self) -> np.ndarray:
        """Boolean vector; decay segments are frozen when not learnable."""
        mask = np.ones(self._dim, dtype=bool)
        if not self.arch.lif.beta_learnable:
            for ell in range(1, self.arch.n_layers + 1):
                sl, _ = self._segments[("beta", ell)]
                mask[sl] = False
        return mask

    # ------------------------------------------------------------------ misc

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, self.vector.copy())

    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.vector)))

    def with_vector(self, vector: np.ndarray) -> "ModelParams":
        return ModelParams(self.arch, np.asarray(vector, dtype=np.float64).copy())
