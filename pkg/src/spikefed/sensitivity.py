"""First-order forecasts of how privatized training moves firing rates.

Around a reference parameter point, the expected rate shift after a window of
clipped-and-noised SGD steps is the rate gradient projected onto the clipping
bias, and the rate variance is the rate gradient pushed through the noise
covariance. Both are validated against Monte-Carlo trajectories here; the
forecasts are only trustworthy in the small-perturbation regime, which the
result flags.

A separate probe measures the operating-point sensitivity of a single LIF
unit: partial derivatives of its firing rate with respect to drive mean,
drive variance, and threshold, via central differences with common random
numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bptt import backward_loss, grad_rate, rate_functional
from .dp import clip_to_norm, dp_sgd_step, split_clip_norm
from .errors import ConfigError
from .lif import LifConfig
from .params import ModelParams, layer_blocks
from .rng import substream

__all__ = [
    "RateShiftForecast",
    "McRateResult",
    "OperatingPointSensitivity",
    "forecast_rate_shift",
    "monte_carlo_rate",
    "operating_point_sensitivity",
]

SMALL_PERTURBATION_FACTOR = 1e-3


@dataclass
class RateShiftForecast:
    """First-order mean shift and variance of the end-of-window rate."""

    mean_shift: float
    variance: float
    clip_gap_projection: float  # rate-gradient . (clipped mean - raw mean)
    grad_rate_norm: float
    small_perturbation: bool


@dataclass
class McRateResult:
    """Monte-Carlo distribution of the end-of-window rate."""

    rate_at_start: float
    mean: float
    variance: float
    mean_shift: float
    rates: np.ndarray
    n_divergent: int


@dataclass
class OperatingPointSensitivity:
    """Rate partials of a single LIF unit under Gaussian drive."""

    rate: float
    d_rate_d_mu: float
    d_rate_d_var: float
    d_rate_d_vth: float
    se_d_mu: float
    se_d_var: float
    se_d_vth: float


def _noise_stds_per_block(params, clip_norm, sigma, batch_size, clip_mode):
    """Per-coordinate noise std per layer block (constant across blocks for
    the equal-L2 split, but kept blockwise so non-isotropic schemes slot in)."""
    blocks = layer_blocks(params.arch)
    std = sigma * clip_norm / batch_size
    return blocks, [std for _ in blocks]


def forecast_rate_shift(
    params: ModelParams,
    probe_spikes,
    probe_labels,
    *,
    clip_norm: float,
    sigma: float,
    lr_schedule,
    clip_mode: str = "global",
    target="network",
    detach_reset: bool = True,
) -> RateShiftForecast:
    """Forecast the rate change from `len(lr_schedule)` privatized SGD steps.

    The clipping gap is evaluated once at the reference point and treated as
    constant over the window; the batch is the probe batch itself, so the
    realized batch size is len(probe_spikes).
    """
    lr_schedule = np.asarray(lr_schedule, dtype=np.float64)
    if lr_schedule.ndim != 1 or lr_schedule.size == 0:
        raise ConfigError("lr_schedule must be a non-empty 1-d sequence")
    batch_size = np.asarray(probe_spikes).shape[0]

    out = backward_loss(
        params,
        probe_spikes,
        probe_labels,
        mode="spiking",
        detach_reset=detach_reset,
        per_sample=True,
    )
    raw_mean = out.per_sample.mean(axis=0)
    if clip_mode == "global":
        clipped, _ = clip_to_norm(out.per_sample, clip_norm)
    else:
        blocks = layer_blocks(params.arch)
        bound = split_clip_norm(clip_norm, len(blocks))
        clipped = out.per_sample.copy()
        for sl in blocks:
            clipped[:, sl], _ = clip_to_norm(out.per_sample[:, sl], bound)
    clip_gap = clipped.mean(axis=0) - raw_mean

    g_rate = grad_rate(
        params, probe_spikes, target=target, mode="spiking", detach_reset=detach_reset
    )
    projection = float(g_rate @ clip_gap)
    mean_shift = -float(lr_schedule.sum()) * projection

    blocks, stds = _noise_stds_per_block(params, clip_norm, sigma, batch_size, clip_mode)
    sq_lr = float((lr_schedule**2).sum())
    variance = sq_lr * sum(
        float(np.dot(g_rate[sl], g_rate[sl])) * std**2 for sl, std in zip(blocks, stds)
    )

    step_scale = float(lr_schedule.max()) * sigma * clip_norm / batch_size
    small = step_scale <= SMALL_PERTURBATION_FACTOR * float(
        np.linalg.norm(params.vector)
    )
    return RateShiftForecast(
        mean_shift=mean_shift,
        variance=variance,
        clip_gap_projection=projection,
        grad_rate_norm=float(np.linalg.norm(g_rate)),
        small_perturbation=small,
    )


def monte_carlo_rate(
    params: ModelParams,
    probe_spikes,
    probe_labels,
    eval_spikes,
    *,
    clip_norm: float,
    sigma: float,
    lr_schedule,
    draws: int = 500,
    seed: int = 0,
    clip_mode: str = "global",
    target="network",
    detach_reset: bool = True,
) -> McRateResult:
    """Run privatized SGD trajectories from `params` and measure the real
    spiking rate on a fixed evaluation batch after the window.

    Per-sample gradients are recomputed at each step's current parameters
    (honest dynamics, unlike the frozen-point forecast). Trajectories that go
    non-finite are excluded and counted.
    """
    lr_schedule = np.asarray(lr_schedule, dtype=np.float64)
    blocks = layer_blocks(params.arch) if clip_mode == "per_layer" else None
    r0 = rate_functional(params, eval_spikes, target=target, mode="spiking")

    rates = []
    n_divergent = 0
    for d in range(draws):
        vec = params.vector.copy()
        work = params.with_vector(vec)
        diverged = False
        for t, lr in enumerate(lr_schedule):
            out = backward_loss(
                work,
                probe_spikes,
                probe_labels,
                mode="spiking",
                detach_reset=detach_reset,
                per_sample=True,
            )
            noisy, _ = dp_sgd_step(
                out.per_sample,
                clip_norm,
                sigma,
                substream(seed, "mc", d, t),
                clip_mode=clip_mode,
                blocks=blocks,
            )
            work.vector -= lr * noisy
            if not work.finite():
                diverged = True
                break
        if diverged:
            n_divergent += 1
            continue
        rates.append(rate_functional(work, eval_spikes, target=target, mode="spiking"))

    rates = np.asarray(rates)
    if rates.size == 0:
        raise ConfigError("all Monte-Carlo trajectories diverged")
    return McRateResult(
        rate_at_start=r0,
        mean=float(rates.mean()),
        variance=float(rates.var(ddof=1)) if rates.size > 1 else 0.0,
        mean_shift=float(rates.mean() - r0),
        rates=rates,
        n_divergent=n_divergent,
    )


def _unit_rate(cfg: LifConfig, drive):
    """Firing rate per trial of a single LIF unit, (trials, T) drive."""
    trials, t_steps = drive.shape
    u = np.full(trials, cfg.v_rest)
    refractory = np.zeros(trials, dtype=np.int64)
    counts = np.zeros(trials)
    for t in range(t_steps):
        u_dec = cfg.v_rest + cfg.beta_init * (u - cfg.v_rest) + drive[:, t]
        if cfg.tau_ref_steps > 0:
            blocked = refractory > 0
            u_dec = np.where(blocked, u, u_dec)
        s = (u_dec >= cfg.v_th).astype(np.float64)
        if cfg.tau_ref_steps > 0:
            s = np.where(blocked, 0.0, s)
            refractory = np.where(blocked, refractory - 1, refractory)
            refractory = np.where(s > 0, cfg.tau_ref_steps, refractory)
        if cfg.reset_mode == "subtractive":
            u = u_dec - s * cfg.v_th
        else:
            u = s * cfg.v_reset + (1.0 - s) * u_dec
        counts += s
    return counts / t_steps


def operating_point_sensitivity(
    cfg: LifConfig,
    mu: float,
    var: float,
    *,
    horizon: int = 200,
    trials: int = 400,
    seed: int = 0,
    d_mu: float | None = None,
    d_var: float | None = None,
    d_vth: float | None = None,
) -> OperatingPointSensitivity:
    """Central-difference rate partials of one LIF unit under N(mu, var) drive.

    Common random numbers: both sides of every difference reuse the same
    standard-normal draws, so the paired per-trial differences have small
    variance and honest standard errors. If var - d_var would be negative the
    variance partial falls back to a forward difference.
    """
    if var < 0:
        raise ConfigError("drive variance must be >= 0")
    cfg.validate()
    if d_mu is None:
        d_mu = 0.01 * cfg.v_th
    if d_var is None:
        d_var = 0.1 * var + 1e-4
    if d_vth is None:
        d_vth = 0.01 * cfg.v_th

    z = substream(seed, "opsens").normal(size=(trials, horizon))

    def rate_per_trial(mu_, var_, vth_):
        drive = mu_ + np.sqrt(var_) * z
        probe_cfg = LifConfig(
            v_th=vth_,
            v_rest=cfg.v_rest,
            v_reset=cfg.v_reset,
            reset_mode=cfg.reset_mode,
            beta_init=cfg.beta_init,
            beta_learnable=cfg.beta_learnable,
            surrogate_slope=cfg.surrogate_slope,
            tau_ref_steps=cfg.tau_ref_steps,
        )
        return _unit_rate(probe_cfg, drive)

    base = rate_per_trial(mu, var, cfg.v_th)

    diff_mu = (rate_per_trial(mu + d_mu, var, cfg.v_th) - rate_per_trial(mu - d_mu, var, cfg.v_th)) / (2 * d_mu)
    if var - d_var >= 0:
        diff_var = (rate_per_trial(mu, var + d_var, cfg.v_th) - rate_per_trial(mu, var - d_var, cfg.v_th)) / (2 * d_var)
    else:
        diff_var = (rate_per_trial(mu, var + d_var, cfg.v_th) - base) / d_var
    diff_vth = (rate_per_trial(mu, var, cfg.v_th + d_vth) - rate_per_trial(mu, var, cfg.v_th - d_vth)) / (2 * d_vth)

    def mean_se(x):
        return float(x.mean()), float(x.std(ddof=1) / np.sqrt(trials))

    m_mu, se_mu = mean_se(diff_mu)
    m_var, se_var = mean_se(diff_var)
    m_vth, se_vth = mean_se(diff_vth)
    return OperatingPointSensitivity(
        rate=float(base.mean()),
        d_rate_d_mu=m_mu,
        d_rate_d_var=m_var,
        d_rate_d_vth=m_vth,
        se_d_mu=se_mu,
        se_d_var=se_var,
        se_d_vth=se_vth,
    )
