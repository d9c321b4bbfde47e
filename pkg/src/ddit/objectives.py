"""Forward diffusion machinery and the two training losses.

The discrete objective predicts the Gaussian noise mixed into a latent at a
uniformly sampled step, weighted by min(SNR, lambda)/SNR; the flow objective
predicts the constant velocity data - noise along straight interpolation
paths.  All per-sample draws are keyed on (seed, purpose, step, sample_id)
so batches are replayable and permutation-invariant.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .conditioning import RFM_TIME_SCALE
from .errors import ConfigError, InputError, NumericError, ShapeError
from .rng import generator

MIN_SNR_LAMBDA = 5.0


@dataclass
class NoiseSchedule:
    """Tabulated beta / cumulative-alpha / SNR values for steps 1..T."""

    betas: Tensor  # (T,) float64, betas[i] is beta_{i+1}
    alphas_bar: Tensor
    snr: Tensor

    @property
    def T(self) -> int:
        return self.betas.shape[0]

    def alpha_bar(self, t: Tensor | int) -> Tensor:
        """Cumulative alpha at 1-indexed step t."""
        t = torch.as_tensor(t)
        if t.numel() and not (1 <= int(t.min()) and int(t.max()) <= self.T):
            raise InputError(f"step outside [1, {self.T}]")
        return self.alphas_bar[t - 1]


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linearly spaced betas with tabulated cumulative alphas and SNR."""
    if T < 1:
        raise ConfigError(f"need at least one step, got T={T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]")
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alphas_bar = torch.cumprod(1.0 - betas, dim=0)
    snr = alphas_bar / (1.0 - alphas_bar)
    return NoiseSchedule(betas=betas, alphas_bar=alphas_bar, snr=snr)


def add_noise(z0: Tensor, eps: Tensor, t: Tensor, sched: NoiseSchedule) -> Tensor:
    """Forward diffusion: sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps.

    t: (B,) 1-indexed steps, one per sample.
    """
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 {tuple(z0.shape)} and eps {tuple(eps.shape)} differ")
    ab = sched.alpha_bar(t).to(z0.dtype).reshape(-1, *([1] * (z0.ndim - 1)))
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps


def min_snr_weight_from_snr(snr: Tensor, snr_lambda: float = MIN_SNR_LAMBDA) -> Tensor:
    """min(SNR, lambda) / SNR; in (0, 1], equal to 1 iff SNR <= lambda."""
    snr = torch.as_tensor(snr, dtype=torch.float64)
    return torch.minimum(snr, torch.as_tensor(float(snr_lambda), dtype=torch.float64)) / snr


def min_snr_weight(t: Tensor | int, sched: NoiseSchedule, snr_lambda: float = MIN_SNR_LAMBDA) -> Tensor:
    t = torch.as_tensor(t)
    if t.numel() and not (1 <= int(t.min()) and int(t.max()) <= sched.T):
        raise InputError(f"step outside [1, {sched.T}]")
    return min_snr_weight_from_snr(sched.snr[t - 1], snr_lambda)


@dataclass
class FlowPath:
    """Straight interpolation state between noise x0 and data x1 at time t."""

    t: Tensor  # (B,) in [0, 1]
    z_t: Tensor
    target_v: Tensor  # x1 - x0


def make_flow_path(x0: Tensor, x1: Tensor, t: Tensor) -> FlowPath:
    """z_t = (1 - t) * x0 + t * x1 with constant target velocity x1 - x0."""
    if x0.shape != x1.shape:
        raise ShapeError(f"x0 {tuple(x0.shape)} and x1 {tuple(x1.shape)} differ")
    if t.numel() and not (0.0 <= float(t.min()) and float(t.max()) <= 1.0):
        raise InputError("flow time must lie in [0, 1]")
    t_b = t.reshape(-1, *([1] * (x0.ndim - 1)))
    return FlowPath(t=t, z_t=(1.0 - t_b) * x0 + t_b * x1, target_v=x1 - x0)


@dataclass
class TrainBatch:
    """One micro-batch after conditioning dropout and modality choice."""

    z0: Tensor  # (B, c, h, w) clean latents
    z_cond: Tensor  # (B, c, h, w) encoded spatial conditions (zeroed if dropped)
    caption_tokens: Tensor  # (B, L) long, null tokens if dropped
    modality: Tensor  # (B,) long flags
    sample_ids: tuple[int, ...]


@dataclass
class LossReport:
    loss: Tensor  # scalar, graph attached
    weights: Tensor  # (B,) per-sample loss weights
    objective: str


def _check_finite(loss: Tensor, objective: str) -> None:
    if not torch.isfinite(loss):
        raise NumericError(f"{objective} loss is non-finite")


def ddpm_loss(
    model,
    batch: TrainBatch,
    sched: NoiseSchedule,
    snr_lambda: float = MIN_SNR_LAMBDA,
    seed: int = 0,
    step: int = 0,
) -> LossReport:
    """Weighted noise-prediction loss, Min-SNR weighting per sample."""
    b = batch.z0.shape[0]
    ts = []
    eps_rows = []
    for sid in batch.sample_ids:
        ts.append(
            int(torch.randint(1, sched.T + 1, (1,), generator=generator(seed, "ddpm-t", step, sid)))
        )
        eps_rows.append(
            torch.randn(batch.z0.shape[1:], generator=generator(seed, "ddpm-eps", step, sid))
        )
    t = torch.tensor(ts, dtype=torch.long)
    eps = torch.stack(eps_rows).to(batch.z0.dtype)

    z_t = add_noise(batch.z0, eps, t, sched)
    enc = model.encode_caption(batch.caption_tokens)
    pred = model(z_t, batch.z_cond, t.to(batch.z0.dtype), enc, batch.modality)

    weights = min_snr_weight(t, sched, snr_lambda).to(batch.z0.dtype)
    per_sample = ((pred - eps) ** 2).reshape(b, -1).mean(dim=1)
    loss = (weights * per_sample).mean()
    _check_finite(loss, "ddpm")
    return LossReport(loss=loss, weights=weights.detach(), objective="ddpm")


def rfm_loss(model, batch: TrainBatch, seed: int = 0, step: int = 0) -> LossReport:
    """Velocity-matching loss along straight noise-to-data paths."""
    b = batch.z0.shape[0]
    x1 = batch.z0
    x0_rows = []
    ts = []
    for sid in batch.sample_ids:
        x0_rows.append(torch.randn(x1.shape[1:], generator=generator(seed, "rfm-x0", step, sid)))
        ts.append(float(torch.rand(1, generator=generator(seed, "rfm-t", step, sid))))
    x0 = torch.stack(x0_rows).to(x1.dtype)
    t = torch.tensor(ts, dtype=x1.dtype)

    path = make_flow_path(x0, x1, t)
    enc = model.encode_caption(batch.caption_tokens)
    pred = model(path.z_t, batch.z_cond, t * RFM_TIME_SCALE, enc, batch.modality)

    per_sample = ((pred - path.target_v) ** 2).reshape(b, -1).mean(dim=1)
    loss = per_sample.mean()
    _check_finite(loss, "rfm")
    return LossReport(loss=loss, weights=torch.ones(b, dtype=x1.dtype), objective="rfm")
