"""Hand-rolled backpropagation through time for the dense LIF stack.

The stack is small and fixed-shape, so the backward pass is specialized rather
than taped: one reverse-time elementwise recurrence per layer plus batched
matmuls for the weight contractions. Spiking mode backpropagates through the
threshold with the fast-sigmoid surrogate; soft mode differentiates the smooth
forward exactly, which is what makes finite-difference validation meaningful.

Gradients come back as flat vectors in the ModelParams layout. Per-sample
gradients (one row per batch element) feed the clipping path; the batch
gradient is computed by an independent contraction rather than by averaging
the per-sample rows, so the two can be checked against each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .lif import (
    NetworkArch,
    beta_from_raw,
    forward,
    soft_spike_grad,
    surrogate_grad,
)
from .params import ModelParams

__all__ = ["LossGrads", "backward_loss", "grad_rate", "loss_value", "rate_functional"]


@dataclass
class LossGrads:
    """Output of backward_loss."""

    loss: float
    logits: np.ndarray
    batch_grad: np.ndarray
    per_sample: np.ndarray | None


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_trainable(arch: NetworkArch):
    if arch.lif.tau_ref_steps > 0:
        raise ConfigError(
            "gradient paths do not model refractory dynamics; "
            "set tau_ref_steps=0 for training"
        )


def _spike_deriv(u_pre, arch: NetworkArch, mode: str):
    x = u_pre - arch.lif.v_th
    if mode == "soft":
        return soft_spike_grad(x, arch.lif.surrogate_slope)
    return surrogate_grad(x, arch.lif.surrogate_slope)


def _reset_factor(trace, fprime, arch: NetworkArch, attach: bool):
    """d(u_post)/d(u_pre) for the layer, shape (B, T, n)."""
    cfg = arch.lif
    if cfg.reset_mode == "subtractive":
        if attach:
            return 1.0 - cfg.v_th * fprime
        return np.ones_like(fprime)
    # hard reset
    base = 1.0 - trace.spikes
    if attach:
        return base + (cfg.v_reset - trace.potentials_pre) * fprime
    return base


def _backward_stack(params, spikes_in, traces, seeds, mode, detach_reset, per_sample):
    """Run the adjoint recurrence down the stack.

    seeds: list of (B, T, n_ell) arrays (or None) holding dL/d(spikes) for
    each LIF layer from sources outside the stack (loss or rate functional).
    Returns (batch_contraction, per_sample_contraction|None); the caller owns
    any 1/B scaling implied by its seed convention.
    """
    arch = params.arch
    cfg = arch.lif
    # soft mode is only used for gradient validation; the reset path must be
    # differentiated exactly there or finite differences cannot match
    attach = (mode == "soft") or (not detach_reset)
    betas = beta_from_raw(params.beta_raw_vector())

    b = spikes_in.shape[0]
    batch_grad = np.zeros(params.dim)
    sample_grads = np.zeros((b, params.dim)) if per_sample else None
    batch_view = ModelParams(arch, batch_grad)

    ds_ext = list(seeds)
    for ell in range(arch.n_layers, 0, -1):
        trace = traces[ell - 1]
        ds = ds_ext[ell - 1]
        if ds is None:
            ds = np.zeros_like(trace.spikes)
        fprime = _spike_deriv(trace.potentials_pre, arch, mode)
        rfac = _reset_factor(trace, fprime, arch, attach)
        beta = betas[ell - 1]

        t_steps = trace.spikes.shape[1]
        adj = np.empty_like(trace.spikes)
        carry = np.zeros((b, trace.spikes.shape[2]))
        for t in range(t_steps - 1, -1, -1):
            a_t = ds[:, t, :] * fprime[:, t, :] + carry * rfac[:, t, :]
            adj[:, t, :] = a_t
            carry = beta * a_t

        layer_in = spikes_in if ell == 1 else traces[ell - 2].spikes
        u_prev_post = np.concatenate(
            [
                np.full((b, 1, trace.spikes.shape[2]), cfg.v_rest),
                trace.potentials_post[:, :-1, :],
            ],
            axis=1,
        )
        # d(beta)/d(raw) through the squashing reparameterization
        sigmoid_jac = beta * (1.0 - beta)

        batch_view.weights(ell)[:] += np.tensordot(adj, layer_in, axes=([0, 1], [0, 1]))
        batch_view.bias(ell)[:] += adj.sum(axis=(0, 1))
        batch_view.beta_raw(ell)[:] += (
            (adj * (u_prev_post - cfg.v_rest)).sum() * sigmoid_jac
        )

        if per_sample:
            w_sl, _ = params._segments[("w", ell)]
            b_sl, _ = params._segments[("b", ell)]
            r_sl, _ = params._segments[("beta", ell)]
            n, m = arch.layer_sizes[ell], arch.layer_sizes[ell - 1]
            per_w = np.matmul(adj.transpose(0, 2, 1), layer_in)  # (B, n, m)
            sample_grads[:, w_sl] += per_w.reshape(b, n * m)
            sample_grads[:, b_sl] += adj.sum(axis=1)
            sample_grads[:, r_sl] += (
                (adj * (u_prev_post - cfg.v_rest)).sum(axis=(1, 2))[:, None]
                * sigmoid_jac
            )

        if ell > 1:
            upstream = adj.reshape(b * t_steps, -1) @ params.weights(ell)
            upstream = upstream.reshape(b, t_steps, -1)
            prev = ds_ext[ell - 2]
            ds_ext[ell - 2] = upstream if prev is None else prev + upstream

    return batch_grad, sample_grads


def loss_value(params, spikes_in, labels, mode: str = "spiking") -> float:
    """Mean cross-entropy of softmaxed output spike counts."""
    _, logits = forward(params, spikes_in, params.arch, mode=mode)
    return _ce_from_logits(logits, labels)


def _ce_from_logits(logits, labels) -> float:
    labels = np.asarray(labels)
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(len(labels)), labels].mean())


def backward_loss(
    params: ModelParams,
    spikes_in,
    labels,
    *,
    mode: str = "spiking",
    detach_reset: bool = True,
    per_sample: bool = False,
) -> LossGrads:
    """Gradients of the cross-entropy loss on output spike counts.

    Args:
        params: model parameters.
        spikes_in: (B, T, n_inputs) input spikes.
        labels: (B,) integer class labels.
        mode: "spiking" (surrogate backward) or "soft" (exact smooth backward).
        detach_reset: drop the reset term from the backward pass (spiking mode
            only; soft mode always differentiates the reset exactly).
        per_sample: also return the (B, d) matrix of per-sample gradients.

    Returns:
        LossGrads with the mean loss, count logits, the full-batch gradient of
        the mean loss, and optionally per-sample gradients of each sample's
        own loss.
    """
    arch = params.arch
    _check_trainable(arch)
    labels = np.asarray(labels)
    spikes_in = np.asarray(spikes_in, dtype=np.float64)
    if labels.ndim != 1 or labels.shape[0] != spikes_in.shape[0]:
        raise ConfigError("labels must be (B,) matching the batch dimension")
    if labels.min() < 0 or labels.max() >= arch.n_outputs:
        raise ConfigError("label outside [0, n_outputs)")

    traces, logits = forward(params, spikes_in, arch, mode=mode)
    probs = _softmax(logits)
    b = spikes_in.shape[0]
    grad_counts = probs.copy()
    grad_counts[np.arange(b), labels] -= 1.0  # dL_i / d count

    seeds = [None] * arch.n_layers
    # counts = sum_t spikes, so the seed repeats along time
    seeds[-1] = np.broadcast_to(
        grad_counts[:, None, :], traces[-1].spikes.shape
    ).copy()

    batch_raw, sample_grads = _backward_stack(
        params, spikes_in, traces, seeds, mode, detach_reset, per_sample
    )
    return LossGrads(
        loss=_ce_from_logits(logits, labels),
        logits=logits,
        batch_grad=batch_raw / b,
        per_sample=sample_grads,
    )


def _rate_seed_scales(arch: NetworkArch, target):
    """Per-layer seed constants for the rate functional, or None."""
    sel = list(range(1, arch.n_layers + 1))
    if target == "network":
        total_n = sum(arch.layer_sizes[ell] for ell in sel)
        return {ell: 1.0 / total_n for ell in sel}
    if isinstance(target, (int, np.integer)) and 1 <= target <= arch.n_layers:
        return {int(target): 1.0 / arch.layer_sizes[int(target)]}
    raise ConfigError(
        f"rate target must be 'network' or a LIF layer index in 1..{arch.n_layers}"
    )


def rate_functional(params, spikes_in, target="network", mode: str = "spiking") -> float:
    """Scalar firing-rate functional the gradient refers to.

    Network target: size-weighted mean rate over all LIF layers (equivalently
    total spikes over total neuron-steps). Integer target: that layer's rate.
    """
    arch = params.arch
    traces, _ = forward(params, spikes_in, arch, mode=mode)
    scales = _rate_seed_scales(arch, target)
    b, t_steps, _ = np.asarray(spikes_in).shape
    total = 0.0
    for ell, scale in scales.items():
        total += traces[ell - 1].spikes.sum() * scale
    return float(total / (b * t_steps))


def grad_rate(
    params: ModelParams,
    spikes_in,
    *,
    target="network",
    mode: str = "spiking",
    detach_reset: bool = True,
) -> np.ndarray:
    """Gradient vector of the batch firing-rate functional.

    In spiking mode the rate is treated as its surrogate-smoothed relaxation
    (threshold derivatives replaced by the fast sigmoid); in soft mode it is
    the exact gradient of the smooth rate.
    """
    arch = params.arch
    _check_trainable(arch)
    spikes_in = np.asarray(spikes_in, dtype=np.float64)
    traces, _ = forward(params, spikes_in, arch, mode=mode)
    scales = _rate_seed_scales(arch, target)
    b, t_steps, _ = spikes_in.shape

    seeds = [None] * arch.n_layers
    for ell, scale in scales.items():
        shape = traces[ell - 1].spikes.shape
        seeds[ell - 1] = np.full(shape, scale / (b * t_steps))

    batch_raw, _ = _backward_stack(
        params, spikes_in, traces, seeds, mode, detach_reset, per_sample=False
    )
    return batch_raw
