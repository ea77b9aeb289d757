"""Leaky integrate-and-fire dynamics and network rollout.

The simulator uses discrete-time LIF units with learnable membrane decay,
threshold spiking, and either subtractive or hard reset. Gradients flow through
the non-differentiable threshold via a fast-sigmoid surrogate; a soft-forward
mode replaces the hard threshold with a logistic unit so that gradients can be
validated against finite differences of an actually-smooth network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

__all__ = [
    "LifConfig",
    "NetworkArch",
    "MembraneTrace",
    "surrogate_grad",
    "soft_spike",
    "soft_spike_grad",
    "lif_step",
    "forward",
]

RESET_MODES = ("subtractive", "hard")
FORWARD_MODES = ("spiking", "soft")


@dataclass(frozen=True)
class LifConfig:
    """Neuron parameters shared by a layer stack.

    beta_init is squashed through a logistic reparameterization during
    learning, so the stored parameter is unconstrained while the effective
    decay stays in (0, 1).
    """

    v_th: float = 1.0
    v_rest: float = 0.0
    v_reset: float = 0.0  # target of the hard reset; unused in subtractive mode
    reset_mode: str = "subtractive"
    beta_init: float = 0.9
    beta_learnable: bool = True
    surrogate_slope: float = 25.0
    tau_ref_steps: int = 0

    def validate(self) -> None:
        if not 0.0 < self.beta_init < 1.0:
            raise ConfigError(f"beta_init must lie in (0,1), got {self.beta_init}")
        if not self.v_th > self.v_rest:
            raise ConfigError(
                f"v_th ({self.v_th}) must exceed v_rest ({self.v_rest})"
            )
        if self.reset_mode not in RESET_MODES:
            raise ConfigError(f"reset_mode must be one of {RESET_MODES}")
        if self.surrogate_slope <= 0:
            raise ConfigError("surrogate_slope must be positive")
        if self.tau_ref_steps < 0:
            raise ConfigError("tau_ref_steps must be >= 0")

    def to_dict(self) -> dict:
        return {
            "v_th": self.v_th,
            "v_rest": self.v_rest,
            "v_reset": self.v_reset,
            "reset_mode": self.reset_mode,
            "beta_init": self.beta_init,
            "beta_learnable": self.beta_learnable,
            "surrogate_slope": self.surrogate_slope,
            "tau_ref_steps": self.tau_ref_steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LifConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class NetworkArch:
    """Dense feedforward stack of LIF layers.

    layer_sizes includes the input channel count; layers 1..L carry neurons.
    """

    layer_sizes: tuple
    lif: LifConfig = field(default_factory=LifConfig)

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(n) for n in self.layer_sizes))

    def validate(self) -> None:
        if len(self.layer_sizes) < 2:
            raise ConfigError("need at least input and output layer sizes")
        if any(n < 1 for n in self.layer_sizes):
            raise ConfigError(f"layer sizes must be >= 1, got {self.layer_sizes}")
        self.lif.validate()

    @property
    def n_layers(self) -> int:
        """Number of LIF layers (input excluded)."""
        return len(self.layer_sizes) - 1

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "lif": self.lif.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkArch":
        arch = cls(tuple(d["layer_sizes"]), LifConfig.from_dict(d["lif"]))
        arch.validate()
        return arch


@dataclass
class MembraneTrace:
    """Per-layer state history from one rollout.

    All arrays are (batch, t_steps, n_neurons) float64 except spikes, which is
    float64 in soft mode (graded activations in (0,1)) and {0,1}-valued in
    spiking mode. potentials_pre holds the membrane value the threshold saw;
    potentials_post holds the value carried to the next step (after reset).
    """

    potentials_pre: np.ndarray
    potentials_post: np.ndarray
    spikes: np.ndarray
    input_currents: np.ndarray


def surrogate_grad(x, slope: float = 25.0):
    """Fast-sigmoid surrogate derivative 1/(1 + slope*|x|)^2 at x = u - v_th."""
    x = np.asarray(x, dtype=np.float64)
    return 1.0 / (1.0 + slope * np.abs(x)) ** 2


def soft_spike(x, slope: float = 25.0):
    """Soft threshold unit used in the smooth verification mode.

    Logistic in 4*slope*x: its derivative at x=0 is `slope`, mirroring how the
    fast-sigmoid family scales with the slope constant. The exact shape is a
    free choice because gradients in soft mode are only ever checked against
    finite differences of this same forward.
    """
    x = np.asarray(x, dtype=np.float64)
    # clip the exponent to dodge overflow warnings; tails saturate anyway
    z = np.clip(-4.0 * slope * x, -500.0, 500.0)
    return 1.0 / (1.0 + np.exp(z))


def soft_spike_grad(x, slope: float = 25.0):
    """Exact derivative of soft_spike."""
    s = soft_spike(x, slope)
    return 4.0 * slope * s * (1.0 - s)


def beta_from_raw(raw):
    """Squash an unconstrained decay parameter into (0, 1)."""
    raw = np.asarray(raw, dtype=np.float64)
    return 1.0 / (1.0 + np.exp(-raw))


def raw_from_beta(beta: float) -> float:
    if not 0.0 < beta < 1.0:
        raise ConfigError(f"beta must lie in (0,1), got {beta}")
    return math.log(beta / (1.0 - beta))


def lif_step(u_prev, input_current, cfg: LifConfig):
    """One LIF update: decay toward rest, integrate, threshold, reset.

    Args:
        u_prev: membrane potentials before this step (any shape).
        input_current: synaptic drive, same shape as u_prev.
        cfg: neuron parameters.

    Returns:
        (u_next, spikes): post-reset potentials and binary spike indicators,
        both float64 arrays of the input shape.
    """
    u_prev = np.asarray(u_prev, dtype=np.float64)
    input_current = np.asarray(input_current, dtype=np.float64)
    if u_prev.shape != input_current.shape:
        raise ConfigError(
            f"shape mismatch: u_prev {u_prev.shape} vs input {input_current.shape}"
        )
    if not np.all(np.isfinite(u_prev)) or not np.all(np.isfinite(input_current)):
        raise ConfigError("non-finite membrane potential or input current")
    cfg.validate()

    u_decayed = cfg.v_rest + cfg.beta_init * (u_prev - cfg.v_rest) + input_current
    spikes = (u_decayed >= cfg.v_th).astype(np.float64)
    if cfg.reset_mode == "subtractive":
        u_next = u_decayed - spikes * cfg.v_th
    else:
        u_next = spikes * cfg.v_reset + (1.0 - spikes) * u_decayed
    return u_next, spikes


def _layer_rollout(inputs, weights, bias, beta, cfg: LifConfig, mode: str):
    """Roll one layer over time.

    inputs: (B, T, n_prev) spikes (or graded activations in soft mode).
    Returns a MembraneTrace for the layer.
    """
    b, t_steps, _ = inputs.shape
    n = weights.shape[0]
    # one big GEMM for all time steps, then an elementwise recurrence
    currents = inputs.reshape(b * t_steps, -1) @ weights.T
    currents = currents.reshape(b, t_steps, n) + bias

    u_pre = np.empty((b, t_steps, n))
    u_post = np.empty((b, t_steps, n))
    spikes = np.empty((b, t_steps, n))
    u = np.full((b, n), cfg.v_rest, dtype=np.float64)

    refractory = None
    if cfg.tau_ref_steps > 0 and mode == "spiking":
        refractory = np.zeros((b, n), dtype=np.int64)

    for t in range(t_steps):
        u_dec = cfg.v_rest + beta * (u - cfg.v_rest) + currents[:, t, :]
        if refractory is not None:
            # refractory neurons ignore drive and hold their reset value
            blocked = refractory > 0
            u_dec = np.where(blocked, u, u_dec)
        if mode == "spiking":
            s = (u_dec >= cfg.v_th).astype(np.float64)
            if refractory is not None:
                s = np.where(blocked, 0.0, s)
        else:
            s = soft_spike(u_dec - cfg.v_th, cfg.surrogate_slope)
        if cfg.reset_mode == "subtractive":
            u_next = u_dec - s * cfg.v_th
        else:
            u_next = s * cfg.v_reset + (1.0 - s) * u_dec
        if refractory is not None:
            refractory = np.where(blocked, refractory - 1, refractory)
            refractory = np.where(s > 0, cfg.tau_ref_steps, refractory)
        u_pre[:, t, :] = u_dec
        u_post[:, t, :] = u_next
        spikes[:, t, :] = s
        u = u_next

    return MembraneTrace(u_pre, u_post, spikes, currents)


def forward(params, spikes_in, arch: NetworkArch, mode: str = "spiking"):
    """Roll the whole stack and return per-layer traces plus count logits.

    Args:
        params: ModelParams holding weights/biases/decay for `arch`.
        spikes_in: (B, T, n_inputs) binary spike tensor.
        arch: network architecture.
        mode: "spiking" (binary threshold) or "soft" (smooth verification).

    Returns:
        (traces, logits): list of MembraneTrace per LIF layer, and (B,
        n_outputs) per-class output spike counts summed over time.
    """
    arch.validate()
    if mode not in FORWARD_MODES:
        raise ConfigError(f"mode must be one of {FORWARD_MODES}")
    spikes_in = np.asarray(spikes_in, dtype=np.float64)
    if spikes_in.ndim != 3 or spikes_in.shape[2] != arch.n_inputs:
        raise ConfigError(
            f"input must be (B, T, {arch.n_inputs}), got {spikes_in.shape}"
        )
    if not np.all(np.isfinite(spikes_in)):
        raise ConfigError("non-finite values in input spikes")
    if not params.finite():
        raise ConfigError("non-finite values in parameters")

    cfg = arch.lif
    betas = beta_from_raw(params.beta_raw_vector())
    traces = []
    layer_in = spikes_in
    for ell in range(1, arch.n_layers + 1):
        trace = _layer_rollout(
            layer_in,
            params.weights(ell),
            params.bias(ell),
            betas[ell - 1],
            cfg,
            mode,
        )
        traces.append(trace)
        layer_in = trace.spikes

    logits = traces[-1].spikes.sum(axis=1)
    return traces, logits
