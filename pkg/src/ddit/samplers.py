"""Guided generation: ancestral / deterministic denoising and Euler flow.

Every sampler evaluates the model twice per step, once with the null
caption and once with the real one, keeping the spatial condition and the
modality flag in both branches, then extrapolates the two predictions with
the guidance scale.  Scales 0 and 1 short-circuit to the single matching
branch so those identities hold bit-for-bit.  All draws are keyed on the
sampler seed, so output is a pure function of (seed, inputs, config).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .conditioning import RFM_TIME_SCALE, CaptionEncoding
from .errors import ConfigError, InputError, UsageError
from .objectives import NoiseSchedule
from .rng import generator

SAMPLER_KINDS = ("ddpm_ancestral", "ddim", "rfm_euler")
# Model objective each sampler kind requires.
KIND_OBJECTIVE = {"ddpm_ancestral": "ddpm", "ddim": "ddpm", "rfm_euler": "rfm"}


@dataclass
class GuidanceConfig:
    omega: float
    null_caption: CaptionEncoding
    # Experimental: also zero the spatial-condition latent in the
    # unconditional branch, so guidance amplifies mask/sketch adherence as
    # well as caption adherence.  Off by default: the standard recipe keeps
    # the spatial condition in both branches.
    null_spatial: bool = False
    # Evaluate both branches as one doubled batch instead of two calls.
    # Either strategy produces the same result.
    batched: bool = False

    @classmethod
    def for_model(cls, model, omega: float, null_spatial: bool = False,
                  batched: bool = False) -> "GuidanceConfig":
        return cls(omega=float(omega), null_caption=model.null_caption(1),
                   null_spatial=null_spatial, batched=batched)


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ddim"
    steps: int = 50
    eta: float = 0.0
    seed: int = 0
    # Optional symmetric bound on the clean-latent extrapolation inside the
    # discrete reverse step.  None (default) runs the plain textbook update;
    # a finite value stabilizes weak noise predictors whose errors the
    # 1/sqrt(alpha_bar) extrapolation would otherwise amplify.
    clip_x0: float | None = None

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ConfigError(f"unknown sampler kind {self.kind!r}")
        if self.steps < 1:
            raise ConfigError(f"need at least one step, got {self.steps}")
        if self.eta < 0:
            raise ConfigError(f"eta must be nonnegative, got {self.eta}")
        if self.clip_x0 is not None and self.clip_x0 <= 0:
            raise ConfigError(f"clip_x0 must be positive, got {self.clip_x0}")


def cfg_combine(uncond: Tensor, cond: Tensor, omega: float) -> Tensor:
    """uncond + omega * (cond - uncond); exact branches at omega 0 and 1."""
    if uncond.shape != cond.shape:
        raise InputError(f"prediction shapes differ: {tuple(uncond.shape)} vs {tuple(cond.shape)}")
    if omega == 0.0:
        return uncond
    if omega == 1.0:
        return cond
    return uncond + omega * (cond - uncond)


def _guided_prediction(
    model, z: Tensor, z_c: Tensor, t_scaled: Tensor, caption: CaptionEncoding,
    modality: Tensor, guidance: GuidanceConfig,
) -> Tensor:
    """Two-branch model evaluation; branches not needed at omega 0/1 are skipped."""
    batch = z.shape[0]
    if guidance.omega == 1.0:
        return model(z, z_c, t_scaled, caption, modality)
    null = guidance.null_caption.repeat(batch)
    z_c_null = torch.zeros_like(z_c) if guidance.null_spatial else z_c
    if guidance.omega == 0.0:
        return model(z, z_c_null, t_scaled, null, modality)
    if guidance.batched:
        doubled_caption = CaptionEncoding(
            sequence=torch.cat((null.sequence, caption.sequence)),
            pooled=torch.cat((null.pooled, caption.pooled)),
        )
        pred = model(
            torch.cat((z, z)),
            torch.cat((z_c_null, z_c)),
            torch.cat((t_scaled, t_scaled)),
            doubled_caption,
            torch.cat((modality, modality)),
        )
        uncond, cond = pred[:batch], pred[batch:]
    else:
        uncond = model(z, z_c_null, t_scaled, null, modality)
        cond = model(z, z_c, t_scaled, caption, modality)
    return cfg_combine(uncond, cond, guidance.omega)


def timestep_sequence(T: int, steps: int) -> list[int]:
    """Descending 1-indexed steps from T to 1, evenly spaced."""
    if steps > T:
        raise ConfigError(f"{steps} sampling steps exceed schedule length {T}")
    if steps == 1:
        return [T]
    return [int(round(v)) for v in torch.linspace(T, 1, steps).tolist()]


def _check_objective(kind: str, objective: str) -> None:
    needed = KIND_OBJECTIVE[kind]
    if objective != needed:
        raise UsageError(
            f"sampler {kind!r} needs a model trained with the {needed!r} objective, got {objective!r}"
        )


def sample_ddpm(
    model,
    z_c: Tensor,
    caption: CaptionEncoding,
    modality: Tensor,
    guidance: GuidanceConfig,
    cfg: SamplerConfig,
    sched: NoiseSchedule,
    objective: str = "ddpm",
) -> Tensor:
    """Reverse the discrete diffusion from pure noise down to a clean latent.

    kind "ddim" takes deterministic steps for eta=0; kind "ddpm_ancestral"
    is the eta=1 stochastic variant (identical to the textbook posterior
    step when run over the full schedule).  The last step returns the
    clean-latent extrapolation with no noise.
    """
    _check_objective(cfg.kind, objective)
    if cfg.kind not in ("ddim", "ddpm_ancestral"):
        raise UsageError(f"sample_ddpm cannot run kind {cfg.kind!r}")
    eta = 1.0 if cfg.kind == "ddpm_ancestral" else cfg.eta

    z = torch.randn(z_c.shape, generator=generator(cfg.seed, "init"), dtype=z_c.dtype)
    steps = timestep_sequence(sched.T, cfg.steps)
    for i, t in enumerate(steps):
        ab_t = float(sched.alpha_bar(t))
        ab_prev = float(sched.alpha_bar(steps[i + 1])) if i + 1 < len(steps) else 1.0
        t_scaled = torch.full((z.shape[0],), float(t), dtype=z.dtype)
        eps = _guided_prediction(model, z, z_c, t_scaled, caption, modality, guidance)

        x0_hat = (z - (1.0 - ab_t) ** 0.5 * eps) / ab_t**0.5
        if cfg.clip_x0 is not None:
            x0_hat = x0_hat.clamp(-cfg.clip_x0, cfg.clip_x0)
        sigma = eta * ((1.0 - ab_prev) / (1.0 - ab_t)) ** 0.5 * (1.0 - ab_t / ab_prev) ** 0.5
        direction = max(1.0 - ab_prev - sigma**2, 0.0) ** 0.5
        z = ab_prev**0.5 * x0_hat + direction * eps
        if sigma > 0.0 and i + 1 < len(steps):
            noise = torch.randn(z.shape, generator=generator(cfg.seed, "step", t), dtype=z.dtype)
            z = z + sigma * noise
    return z


def sample_rfm_euler(
    model,
    z_c: Tensor,
    caption: CaptionEncoding,
    modality: Tensor,
    guidance: GuidanceConfig,
    cfg: SamplerConfig,
    objective: str = "rfm",
) -> Tensor:
    """Integrate the guided velocity field from t=0 noise to t=1 data."""
    _check_objective("rfm_euler", objective)
    if cfg.kind != "rfm_euler":
        raise UsageError(f"sample_rfm_euler cannot run kind {cfg.kind!r}")

    z = torch.randn(z_c.shape, generator=generator(cfg.seed, "init"), dtype=z_c.dtype)
    dt = 1.0 / cfg.steps
    for i in range(cfg.steps):
        t = i * dt
        t_scaled = torch.full((z.shape[0],), t * RFM_TIME_SCALE, dtype=z.dtype)
        v = _guided_prediction(model, z, z_c, t_scaled, caption, modality, guidance)
        z = z + v * dt
    return z


def sample(
    model,
    z_c: Tensor,
    caption: CaptionEncoding,
    modality: Tensor,
    guidance: GuidanceConfig,
    cfg: SamplerConfig,
    sched: NoiseSchedule | None = None,
    objective: str = "ddpm",
) -> Tensor:
    """Dispatch on sampler kind, guarding the model-objective pairing."""
    _check_objective(cfg.kind, objective)
    if cfg.kind == "rfm_euler":
        return sample_rfm_euler(model, z_c, caption, modality, guidance, cfg, objective)
    if sched is None:
        raise UsageError("discrete samplers need a noise schedule")
    return sample_ddpm(model, z_c, caption, modality, guidance, cfg, sched, objective)
