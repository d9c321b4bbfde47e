"""Optimization loop: accumulation, clipping, decoupled AdamW, EMA, resume.

All randomness (batch order, per-sample draws, conditioning dropout,
modality choice) is keyed on (seed, purpose, step, sample_id), so a run is
a pure function of its configs and dataset, and resuming from a checkpoint
reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import csv
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import Tensor, nn

from . import toydata
from .conditioning import NULL_TOKEN
from .dit_core import DualStreamDiT, ModelConfig
from .errors import ConfigError, NumericError, PersistenceError, StateError
from .latentcodec import (
    CodecConfig,
    encode_condition,
    image_to_float,
    make_codec,
    read_latent,
    write_latent,
)
from .objectives import TrainBatch, ddpm_loss, make_linear_schedule, rfm_loss
from .rng import derive_seed, generator
from .tensorio import read_tensor_file, write_tensor_file

OBJECTIVES = ("ddpm", "rfm")


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "ddpm"
    epochs: float | None = None
    max_steps: int | None = 2000
    batch_size: int = 32
    accum_steps: int = 1
    base_lr: float = 1e-4
    warmup_steps: int = 100
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    max_grad_norm: float = 0.5
    ema_decay: float = 0.9999
    cond_dropout: float = 0.05
    seed: int = 0
    snr_lambda: float = 5.0
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.epochs is None and self.max_steps is None:
            raise ConfigError("one of epochs or max_steps is required")
        if self.batch_size < 1 or self.accum_steps < 1:
            raise ConfigError("batch_size and accum_steps must be positive")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ConfigError(f"cond_dropout must be in [0, 1), got {self.cond_dropout}")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError(f"ema_decay must be in [0, 1], got {self.ema_decay}")
        if self.base_lr <= 0 or self.max_grad_norm <= 0:
            raise ConfigError("base_lr and max_grad_norm must be positive")


def cosine_lr(step: int, warmup: int, total: int, base_lr: float) -> float:
    """Linear ramp to base_lr over warmup steps, then cosine decay to zero."""
    if step < warmup:
        return base_lr * step / warmup
    span = max(total - warmup, 1)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / span))


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm.

    Returns the pre-clip norm.  Direction is preserved and the norm never
    increases.
    """
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = torch.sqrt(sum(g.pow(2).sum() for g in grads))
    norm = float(total)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g.mul_(scale)
    return norm


def decay_exclusions(model: nn.Module) -> set[str]:
    """Parameters updated without weight decay: biases, modulation maps, tables."""
    excluded = set()
    for name, _ in model.named_parameters():
        if (
            name.endswith(".bias")
            or ".adaln." in name
            or "caption_encoder.tokens" in name
            or "caption_encoder.positions" in name
            or "modality_embed.table" in name
        ):
            excluded.add(name)
    return excluded


class AdamW:
    """Decoupled-weight-decay adaptive-moment optimizer over named parameters.

    Written out explicitly so the full optimizer state is two named tensors
    per parameter plus a step counter, which serializes directly into the
    checkpoint container.
    """

    def __init__(
        self,
        named_params: dict[str, nn.Parameter],
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
        no_decay: set[str] | None = None,
    ):
        self.params = dict(named_params)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay or ())
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            if self.weight_decay and name not in self.no_decay:
                p.mul_(1.0 - lr * self.weight_decay)
            m = self.m[name]
            v = self.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(self.eps), value=-lr)

    def load_state(self, m: dict[str, Tensor], v: dict[str, Tensor], step_count: int) -> None:
        if set(m) != set(self.params) or set(v) != set(self.params):
            raise StateError("optimizer state names do not match model parameters")
        for name in self.params:
            self.m[name].copy_(m[name])
            self.v[name].copy_(v[name])
        self.step_count = step_count


def make_ema(model: nn.Module) -> dict[str, Tensor]:
    return {name: p.detach().clone() for name, p in model.named_parameters()}


@torch.no_grad()
def ema_update(ema_params: dict[str, Tensor], model_params, decay: float) -> dict[str, Tensor]:
    """ema <- decay * ema + (1 - decay) * model, elementwise."""
    model_params = dict(model_params)
    if set(ema_params) != set(model_params):
        raise StateError("EMA and model parameter name sets differ")
    for name, ema in ema_params.items():
        ema.mul_(decay).add_(model_params[name].detach(), alpha=1.0 - decay)
    return ema_params


def apply_cond_dropout(batch: TrainBatch, p: float, seed: int, step: int) -> TrainBatch:
    """Independently null the caption and zero the spatial condition per sample."""
    if p == 0.0:
        return batch
    tokens = batch.caption_tokens.clone()
    z_cond = batch.z_cond.clone()
    for i, sid in enumerate(batch.sample_ids):
        if float(torch.rand(1, generator=generator(seed, "drop-text", step, sid))) < p:
            tokens[i] = NULL_TOKEN
        if float(torch.rand(1, generator=generator(seed, "drop-spatial", step, sid))) < p:
            z_cond[i] = 0.0
    return TrainBatch(
        z0=batch.z0,
        z_cond=z_cond,
        caption_tokens=tokens,
        modality=batch.modality,
        sample_ids=batch.sample_ids,
    )


class PreparedData:
    """Dataset latents and captions held in memory, with an on-disk latent cache."""

    ROLES = ("img", "mask", "sketch")

    def __init__(self, dataset_dir, codec_cfg: CodecConfig):
        self.codec = make_codec(codec_cfg)
        self.samples = toydata.load_dataset(dataset_dir)
        if not self.samples:
            raise PersistenceError(f"no samples under {dataset_dir}")
        tag = f"latents_{codec_cfg.kind}{codec_cfg.levels}_s{codec_cfg.scaling:g}"
        cache_dir = Path(dataset_dir) / tag
        try:
            cache_dir.mkdir(exist_ok=True)
            self._cache_dir = cache_dir
        except OSError:
            self._cache_dir = None

        z_img, z_mask, z_sketch = [], [], []
        for sample in self.samples:
            z_img.append(self._latent(sample.sample_id, "img", sample))
            z_mask.append(self._latent(sample.sample_id, "mask", sample))
            z_sketch.append(self._latent(sample.sample_id, "sketch", sample))
        self.z_img = torch.stack(z_img)
        self.z_mask = torch.stack(z_mask)
        self.z_sketch = torch.stack(z_sketch)
        self.captions = torch.tensor([s.caption for s in self.samples], dtype=torch.long)
        self.train_ids, self.holdout_ids = toydata.train_holdout_split(len(self.samples))

    def _latent(self, sample_id: int, role: str, sample) -> Tensor:
        path = None
        if self._cache_dir is not None:
            path = self._cache_dir / f"{sample_id:0{toydata.ID_WIDTH}d}.{role}.lat"
            if path.is_file():
                return read_latent(path)
        if role == "img":
            z = self.codec.encode(image_to_float(sample.image))
        elif role == "mask":
            z = encode_condition(self.codec, sample.mask, modality=0)
        else:
            z = encode_condition(self.codec, sample.sketch, modality=1)
        if path is not None:
            try:
                write_latent(path, z)
            except PersistenceError:
                pass
        return z

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return tuple(self.z_img.shape[1:])


@dataclass
class Checkpoint:
    """Full training state: parameters, EMA, optimizer moments, configs."""

    model_state: dict[str, Tensor]
    ema_state: dict[str, Tensor]
    opt_m: dict[str, Tensor]
    opt_v: dict[str, Tensor]
    opt_step: int
    step: int
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    codec_cfg: CodecConfig
    path: Path | None = field(default=None, compare=False)

    def save(self, prefix) -> Path:
        prefix = Path(prefix)
        tensors = {}
        for name, t in self.model_state.items():
            tensors[f"model.{name}"] = t
        for name, t in self.ema_state.items():
            tensors[f"ema.{name}"] = t
        for name, t in self.opt_m.items():
            tensors[f"opt.m.{name}"] = t
        for name, t in self.opt_v.items():
            tensors[f"opt.v.{name}"] = t
        write_tensor_file(prefix.with_suffix(".bin"), tensors)
        sidecar = {
            "step": self.step,
            "opt_step": self.opt_step,
            "model": asdict(self.model_cfg),
            "train": asdict(self.train_cfg),
            "codec": asdict(self.codec_cfg),
            "rng": {"scheme": "stateless-keyed", "seed": self.train_cfg.seed, "step": self.step},
        }
        prefix.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
        self.path = prefix
        return prefix

    @classmethod
    def load(cls, prefix) -> "Checkpoint":
        prefix = Path(prefix)
        if prefix.suffix in (".bin", ".json"):
            prefix = prefix.with_suffix("")
        bin_path = prefix.with_suffix(".bin")
        side_path = prefix.with_suffix(".json")
        if not bin_path.is_file() or not side_path.is_file():
            raise PersistenceError(f"missing checkpoint files for prefix {prefix}")
        sidecar = json.loads(side_path.read_text())
        tensors = read_tensor_file(bin_path)
        groups: dict[str, dict[str, Tensor]] = {"model.": {}, "ema.": {}, "opt.m.": {}, "opt.v.": {}}
        for name, tensor in tensors.items():
            for key in ("opt.m.", "opt.v.", "model.", "ema."):
                if name.startswith(key):
                    groups[key][name[len(key):]] = tensor
                    break
            else:
                raise PersistenceError(f"unexpected tensor {name!r} in {bin_path}")
        train_dict = dict(sidecar["train"])
        train_dict["betas"] = tuple(train_dict["betas"])
        return cls(
            model_state=groups["model."],
            ema_state=groups["ema."],
            opt_m=groups["opt.m."],
            opt_v=groups["opt.v."],
            opt_step=int(sidecar["opt_step"]),
            step=int(sidecar["step"]),
            model_cfg=ModelConfig(**sidecar["model"]),
            train_cfg=TrainConfig(**train_dict),
            codec_cfg=CodecConfig(**sidecar["codec"]),
            path=prefix,
        )

    def build_model(self, use_ema: bool = False) -> DualStreamDiT:
        model = DualStreamDiT(self.model_cfg)
        state = self.ema_state if use_ema else self.model_state
        model.load_state_dict(state)
        return model


class _BatchStream:
    """Deterministic epoch-permuted id stream over the training split."""

    def __init__(self, train_ids: list[int], seed: int):
        self.train_ids = train_ids
        self.seed = seed
        self._perms: dict[int, list[int]] = {}

    def ids_at(self, position: int, count: int) -> list[int]:
        out = []
        n = len(self.train_ids)
        for pos in range(position, position + count):
            epoch, slot = divmod(pos, n)
            perm = self._perms.get(epoch)
            if perm is None:
                order = torch.randperm(n, generator=generator(self.seed, "order", epoch)).tolist()
                perm = [self.train_ids[i] for i in order]
                self._perms[epoch] = perm
                # keep at most a couple of epochs cached
                for old in [e for e in self._perms if e < epoch - 1]:
                    del self._perms[old]
            out.append(perm[slot])
        return out


def total_optimizer_steps(cfg: TrainConfig, n_train: int) -> int:
    if cfg.max_steps is not None:
        return cfg.max_steps
    per_epoch = max(1, n_train // (cfg.batch_size * cfg.accum_steps))
    return max(1, math.ceil(cfg.epochs * per_epoch))


def _prune_checkpoints(out_dir: Path, keep: int = 3) -> None:
    cadence = sorted(out_dir.glob("ckpt_[0-9]*.bin"))
    for stale in cadence[:-keep]:
        stale.unlink(missing_ok=True)
        stale.with_suffix(".json").unlink(missing_ok=True)


def train(
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    codec_cfg: CodecConfig,
    dataset_dir,
    out_dir,
    resume=None,
    init_from=None,
) -> Checkpoint:
    """Run the optimization loop and return the final checkpoint.

    resume: checkpoint prefix for exact continuation (configs must match).
    init_from: checkpoint prefix whose model/EMA weights seed a fresh run,
    e.g. when switching training resolution; the optimizer starts cold.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = PreparedData(dataset_dir, codec_cfg)

    c, h, w = data.latent_shape
    if c != model_cfg.latent_channels:
        raise ConfigError(
            f"model expects {model_cfg.latent_channels} latent channels, codec produces {c}"
        )
    if h % model_cfg.patch or w % model_cfg.patch:
        raise ConfigError(f"latent {h}x{w} not divisible by patch {model_cfg.patch}")

    # parameter init draws from the global stream; pin it so a run is a
    # pure function of (seed, configs, dataset)
    torch.manual_seed(derive_seed(train_cfg.seed, "model-init"))
    model = DualStreamDiT(model_cfg)
    optimizer = AdamW(
        dict(model.named_parameters()),
        betas=train_cfg.betas,
        eps=train_cfg.adam_eps,
        weight_decay=train_cfg.weight_decay,
        no_decay=decay_exclusions(model),
    )
    ema = make_ema(model)
    start_step = 0

    if resume is not None and init_from is not None:
        raise ConfigError("resume and init_from are mutually exclusive")
    if resume is not None:
        ck = Checkpoint.load(resume)
        if ck.model_cfg != model_cfg or ck.train_cfg != train_cfg or ck.codec_cfg != codec_cfg:
            raise StateError("checkpoint configs do not match this run; use init_from to warm-start")
        model.load_state_dict(ck.model_state)
        optimizer.load_state(ck.opt_m, ck.opt_v, ck.opt_step)
        ema = {k: v.clone() for k, v in ck.ema_state.items()}
        start_step = ck.step
    elif init_from is not None:
        ck = Checkpoint.load(init_from)
        model.load_state_dict(ck.model_state)
        ema = {k: v.clone() for k, v in ck.ema_state.items()}

    sched = make_linear_schedule(train_cfg.timesteps, train_cfg.beta_start, train_cfg.beta_end)
    stream = _BatchStream(data.train_ids, train_cfg.seed)
    total = total_optimizer_steps(train_cfg, len(data.train_ids))
    if start_step >= total:
        raise ConfigError(f"checkpoint already at step {start_step} of {total}")

    log_path = out / "loss.csv"
    new_log = start_step == 0 or not log_path.exists()
    log_file = open(log_path, "w" if new_log else "a", newline="")
    log = csv.writer(log_file)
    if new_log:
        log.writerow(["step", "lr", "loss", "grad_norm"])

    recent = deque(maxlen=100)
    best_smoothed = math.inf
    checkpoint = None
    b = train_cfg.batch_size

    try:
        for step in range(start_step + 1, total + 1):
            optimizer.zero_grad()
            step_loss = 0.0
            for micro in range(train_cfg.accum_steps):
                position = ((step - 1) * train_cfg.accum_steps + micro) * b
                ids = stream.ids_at(position, b)
                modality = torch.tensor(
                    [
                        int(torch.randint(2, (1,), generator=generator(train_cfg.seed, "modality", step, sid)))
                        for sid in ids
                    ],
                    dtype=torch.long,
                )
                z_cond = torch.stack(
                    [
                        data.z_mask[sid] if modality[i] == 0 else data.z_sketch[sid]
                        for i, sid in enumerate(ids)
                    ]
                )
                batch = TrainBatch(
                    z0=data.z_img[ids],
                    z_cond=z_cond,
                    caption_tokens=data.captions[ids],
                    modality=modality,
                    sample_ids=tuple(ids),
                )
                batch = apply_cond_dropout(batch, train_cfg.cond_dropout, train_cfg.seed, step)
                try:
                    if train_cfg.objective == "ddpm":
                        report = ddpm_loss(
                            model, batch, sched, train_cfg.snr_lambda, train_cfg.seed, step
                        )
                    else:
                        report = rfm_loss(model, batch, train_cfg.seed, step)
                except NumericError:
                    replay = {
                        "step": step,
                        "micro": micro,
                        "sample_ids": list(ids),
                        "seed": train_cfg.seed,
                        "objective": train_cfg.objective,
                    }
                    (out / "nan_replay.json").write_text(json.dumps(replay, indent=2) + "\n")
                    raise NumericError(
                        f"non-finite loss at step {step} micro {micro}; replay keys in nan_replay.json"
                    ) from None
                (report.loss / train_cfg.accum_steps).backward()
                step_loss += float(report.loss.detach()) / train_cfg.accum_steps

            grad_norm = clip_gradients(model.parameters(), train_cfg.max_grad_norm)
            lr = cosine_lr(step - 1, train_cfg.warmup_steps, total, train_cfg.base_lr)
            optimizer.step(lr)
            ema_update(ema, model.named_parameters(), train_cfg.ema_decay)

            recent.append(step_loss)
            log.writerow([step, f"{lr:.8e}", f"{step_loss:.8e}", f"{grad_norm:.8e}"])

            if step % train_cfg.checkpoint_every == 0 or step == total:
                log_file.flush()
                checkpoint = Checkpoint(
                    model_state={k: v.detach().clone() for k, v in model.named_parameters()},
                    ema_state={k: v.clone() for k, v in ema.items()},
                    opt_m={k: v.clone() for k, v in optimizer.m.items()},
                    opt_v={k: v.clone() for k, v in optimizer.v.items()},
                    opt_step=optimizer.step_count,
                    step=step,
                    model_cfg=model_cfg,
                    train_cfg=train_cfg,
                    codec_cfg=codec_cfg,
                )
                checkpoint.save(out / f"ckpt_{step:07d}")
                smoothed = sum(recent) / len(recent)
                if smoothed < best_smoothed:
                    best_smoothed = smoothed
                    checkpoint.save(out / "ckpt_best")
                if step == total:
                    checkpoint.save(out / "ckpt_final")
                _prune_checkpoints(out)
    finally:
        log_file.close()

    return checkpoint


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as f:
        return [
            {"step": int(r["step"]), "lr": float(r["lr"]), "loss": float(r["loss"]),
             "grad_norm": float(r["grad_norm"])}
            for r in csv.DictReader(f)
        ]


def smoothed_loss_at(rows: list[dict], step: int, window: int = 100) -> float:
    """Mean loss over the `window` logged steps ending at `step`."""
    losses = [r["loss"] for r in rows if step - window < r["step"] <= step]
    if not losses:
        raise ConfigError(f"no logged steps in ({step - window}, {step}]")
    return sum(losses) / len(losses)
