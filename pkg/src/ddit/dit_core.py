"""Dual-stream diffusion transformer over channel-concatenated latents.

Image tokens come from non-overlapping patches of the concatenated noisy
and condition latents; text tokens are projected caption embeddings.  Each
block keeps the two streams in separate parameterized paths that meet only
inside one joint softmax attention, where image tokens carry 2D axial
rotary positions and text tokens 1D sequential ones.  All modulation
(shift/scale/gate per stream and sublayer) is predicted from the global
conditioning vector by a single zero-initialized linear map per block, so a
freshly initialized model is the zero function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .conditioning import CaptionEncoder, CaptionEncoding, GlobalConditioner, GlobalConditioning
from .errors import ConfigError, InputError, NumericError, ShapeError
from .rope import RopeTable, apply_rope_1d, apply_rope_2d, grid_positions

LN_EPS = 1e-6
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 128
    depth: int = 4
    heads: int = 4
    patch: int = 2
    latent_channels: int = 48
    mlp_ratio: int = 4
    text_dim: int = 64
    text_len_max: int = 8
    vocab_size: int = 16
    freq_dim: int = 256
    rope_base: float = 10000.0
    n_modalities: int = 2

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if (self.hidden // self.heads) % 4 != 0:
            raise ConfigError(f"head dim {self.hidden // self.heads} must be divisible by 4")
        for name in ("hidden", "depth", "heads", "patch", "latent_channels",
                     "mlp_ratio", "text_dim", "text_len_max", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.freq_dim % 2 != 0:
            raise ConfigError(f"freq_dim must be even, got {self.freq_dim}")

    @property
    def in_channels(self) -> int:
        return 2 * self.latent_channels

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


def patch_flatten(z: Tensor, patch: int) -> Tensor:
    """(B, C, H, W) -> (B, N, patch*patch*C) row-major patches.

    Each patch is flattened channel-first, then by row, then by column;
    tokens run row-major over the patch grid.
    """
    b, c, h, w = z.shape
    if h % patch or w % patch:
        raise ShapeError(f"latent {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = z.reshape(b, c, gh, patch, gw, patch)
    x = x.permute(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * patch * patch)


def unpatchify(tokens: Tensor, grid: tuple[int, int], patch: int, channels: int) -> Tensor:
    """Exact inverse of patch_flatten: (B, N, patch*patch*C) -> (B, C, H, W)."""
    b, n, d = tokens.shape
    gh, gw = grid
    if n != gh * gw:
        raise ShapeError(f"{n} tokens do not fill a {gh}x{gw} grid")
    if d != channels * patch * patch:
        raise ShapeError(f"token dim {d} != {channels}*{patch}^2")
    x = tokens.reshape(b, gh, gw, channels, patch, patch)
    x = x.permute(0, 3, 1, 4, 2, 5)
    return x.reshape(b, channels, gh * patch, gw * patch)


def token_grid(height: int, width: int, patch: int) -> tuple[int, int]:
    if height % patch or width % patch:
        raise ShapeError(f"latent {height}x{width} not divisible by patch {patch}")
    return height // patch, width // patch


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1.0 + scale.unsqueeze(1)) + shift.unsqueeze(1)


def scaled_attention(q: Tensor, k: Tensor, v: Tensor, return_probs: bool = False):
    """Joint softmax attention over (B, H, n, d) tensors."""
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    probs = torch.softmax(scores, dim=-1)
    out = probs @ v
    return (out, probs) if return_probs else out


@dataclass
class ModulationParams:
    """The twelve modulation vectors of one block, split from one projection.

    Ordering within the projected vector: image attention (shift, scale,
    gate), image MLP, text attention, text MLP.
    """

    img_attn_shift: Tensor
    img_attn_scale: Tensor
    img_attn_gate: Tensor
    img_mlp_shift: Tensor
    img_mlp_scale: Tensor
    img_mlp_gate: Tensor
    txt_attn_shift: Tensor
    txt_attn_scale: Tensor
    txt_attn_gate: Tensor
    txt_mlp_shift: Tensor
    txt_mlp_scale: Tensor
    txt_mlp_gate: Tensor

    COUNT = 12

    @classmethod
    def from_vector(cls, projected: Tensor) -> "ModulationParams":
        return cls(*torch.chunk(projected, cls.COUNT, dim=-1))


class DualStreamBlock(nn.Module):
    """One transformer block with per-stream parameters and shared attention."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.adaln = nn.Linear(dim, ModulationParams.COUNT * dim)
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=LN_EPS)
        self.img_qkv = nn.Linear(dim, 3 * dim)
        self.img_proj = nn.Linear(dim, dim)
        self.img_mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )
        self.txt_qkv = nn.Linear(dim, 3 * dim)
        self.txt_proj = nn.Linear(dim, dim)
        self.txt_mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def modulation(self, cond: Tensor) -> ModulationParams:
        return ModulationParams.from_vector(self.adaln(cond))

    def _split_heads(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, -1).transpose(1, 2)

    def _merge_heads(self, x: Tensor) -> Tensor:
        b, _, n, _ = x.shape
        return x.transpose(1, 2).reshape(b, n, self.dim)

    def forward(
        self,
        img: Tensor,
        txt: Tensor,
        cond: Tensor,
        img_rope,
        txt_rope,
    ) -> tuple[Tensor, Tensor]:
        """img_rope/txt_rope: callables rotating (B, H, n, d) query/key tensors.

        The caller decides each stream's positional treatment; the block
        only guarantees the rotation is applied before the joint attention.
        """
        mod = self.modulation(cond)
        n_img = img.shape[1]

        xi = modulate(self.norm(img), mod.img_attn_shift, mod.img_attn_scale)
        xt = modulate(self.norm(txt), mod.txt_attn_shift, mod.txt_attn_scale)
        qi, ki, vi = torch.chunk(self.img_qkv(xi), 3, dim=-1)
        qt, kt, vt = torch.chunk(self.txt_qkv(xt), 3, dim=-1)
        qi, ki, vi = map(self._split_heads, (qi, ki, vi))
        qt, kt, vt = map(self._split_heads, (qt, kt, vt))

        qi, ki = img_rope(qi), img_rope(ki)
        qt, kt = txt_rope(qt), txt_rope(kt)

        q = torch.cat((qi, qt), dim=-2)
        k = torch.cat((ki, kt), dim=-2)
        v = torch.cat((vi, vt), dim=-2)
        joint = scaled_attention(q, k, v)
        out_img = self._merge_heads(joint[..., :n_img, :])
        out_txt = self._merge_heads(joint[..., n_img:, :])

        img = img + mod.img_attn_gate.unsqueeze(1) * self.img_proj(out_img)
        txt = txt + mod.txt_attn_gate.unsqueeze(1) * self.txt_proj(out_txt)

        img = img + mod.img_mlp_gate.unsqueeze(1) * self.img_mlp(
            modulate(self.norm(img), mod.img_mlp_shift, mod.img_mlp_scale)
        )
        txt = txt + mod.txt_mlp_gate.unsqueeze(1) * self.txt_mlp(
            modulate(self.norm(txt), mod.txt_mlp_shift, mod.txt_mlp_scale)
        )
        return img, txt


class FinalLayer(nn.Module):
    """Modulated norm plus zero-initialized projection to per-patch outputs."""

    def __init__(self, dim: int, patch: int, out_channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=LN_EPS)
        self.adaln = nn.Linear(dim, 2 * dim)
        self.linear = nn.Linear(dim, patch * patch * out_channels)

    def forward(self, tokens: Tensor, cond: Tensor) -> Tensor:
        shift, scale = torch.chunk(self.adaln(cond), 2, dim=-1)
        return self.linear(modulate(self.norm(tokens), shift, scale))


class DualStreamDiT(nn.Module):
    """The full network: patch embedding, dual-stream blocks, prediction head.

    forward() consumes an already-scaled timestep value: pass the discrete
    denoising step directly, or a continuous flow time multiplied by
    conditioning.RFM_TIME_SCALE.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.hidden
        self.caption_encoder = CaptionEncoder(config.vocab_size, config.text_dim, config.text_len_max)
        self.text_proj = nn.Linear(config.text_dim, d)
        self.conditioner = GlobalConditioner(
            config.freq_dim, config.text_dim, d, config.n_modalities
        )
        self.patch_embed = nn.Linear(config.patch * config.patch * config.in_channels, d)
        self.blocks = nn.ModuleList(
            DualStreamBlock(d, config.heads, config.mlp_ratio) for _ in range(config.depth)
        )
        self.final = FinalLayer(d, config.patch, config.latent_channels)
        self.img_rope = RopeTable(config.head_dim // 2, config.rope_base)
        self.txt_rope = RopeTable(config.head_dim, config.rope_base)
        self._init_weights()

    def _init_weights(self) -> None:
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.trunc_normal_(module.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
                nn.init.zeros_(module.bias)
            elif isinstance(module, nn.Embedding):
                nn.init.trunc_normal_(module.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
        nn.init.trunc_normal_(
            self.caption_encoder.positions, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD
        )
        # Zero modulation and head: every block starts as the identity and
        # the whole network as the zero function.
        for block in self.blocks:
            nn.init.zeros_(block.adaln.weight)
            nn.init.zeros_(block.adaln.bias)
        nn.init.zeros_(self.final.adaln.weight)
        nn.init.zeros_(self.final.adaln.bias)
        nn.init.zeros_(self.final.linear.weight)
        nn.init.zeros_(self.final.linear.bias)

    def encode_caption(self, token_ids: Tensor) -> CaptionEncoding:
        return self.caption_encoder(token_ids)

    def null_caption(self, batch: int = 1) -> CaptionEncoding:
        return self.caption_encoder.null_encoding(batch)

    def conditioning(self, t: Tensor, caption: CaptionEncoding, modality: Tensor) -> GlobalConditioning:
        return self.conditioner(t, caption, modality)

    def forward(
        self,
        z_t: Tensor,
        z_c: Tensor,
        t: Tensor,
        caption: CaptionEncoding,
        modality: Tensor,
    ) -> Tensor:
        """Predict noise or velocity, shaped like z_t.

        z_t, z_c: (B, c, h, w) with matching shapes; t: (B,) scaled time;
        caption: encoded tokens; modality: (B,) flags.
        """
        if z_t.shape != z_c.shape:
            raise InputError(f"latent/condition shapes differ: {tuple(z_t.shape)} vs {tuple(z_c.shape)}")
        cfg = self.config
        if z_t.shape[1] != cfg.latent_channels:
            raise ShapeError(f"expected {cfg.latent_channels} latent channels, got {z_t.shape[1]}")
        grid = token_grid(z_t.shape[2], z_t.shape[3], cfg.patch)

        img = self.patch_embed(patch_flatten(torch.cat((z_t, z_c), dim=1), cfg.patch))
        txt = self.text_proj(caption.sequence)
        cond = self.conditioning(t, caption, modality).vector

        img_pos = grid_positions(*grid)
        txt_pos = torch.arange(txt.shape[1])
        img_rope = lambda x: apply_rope_2d(x, img_pos, self.img_rope)  # noqa: E731
        txt_rope = lambda x: apply_rope_1d(x, txt_pos, self.txt_rope)  # noqa: E731
        for index, block in enumerate(self.blocks):
            img, txt = block(img, txt, cond, img_rope, txt_rope)
            if not (torch.isfinite(img).all() and torch.isfinite(txt).all()):
                raise NumericError(f"non-finite activations after block {index}")
        tokens = self.final(img, cond)
        return unpatchify(tokens, grid, cfg.patch, cfg.latent_channels)


def count_parameters(config: ModelConfig) -> int:
    """Closed-form learnable-scalar count for the layout built above.

    Mirrors the module structure exactly: per block one D->12D modulation
    projection plus two streams of QKV/output/MLP projections (36 D^2
    dominant term), plus caption encoder, bridges, embedders, patch
    embedding, and the final layer.
    """
    d = config.hidden
    dt = config.text_dim
    p2c_in = config.patch * config.patch * config.in_channels
    p2c_out = config.patch * config.patch * config.latent_channels

    caption_encoder = config.vocab_size * dt + config.text_len_max * dt + (dt * dt + dt)
    text_proj = dt * d + d
    time_embed = (config.freq_dim * d + d) + (d * d + d)
    caption_embed = (dt * d + d) + (d * d + d)
    modality = config.n_modalities * d
    patch_embed = p2c_in * d + d

    per_stream = (3 * d * d + 3 * d) + (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d)
    block = (12 * d * d + 12 * d) + 2 * per_stream
    final = (2 * d * d + 2 * d) + (d * p2c_out + p2c_out)

    return (
        caption_encoder
        + text_proj
        + time_embed
        + caption_embed
        + modality
        + patch_embed
        + config.depth * block
        + final
    )


def count_parameters_per_block(config: ModelConfig) -> int:
    d = config.hidden
    per_stream = (3 * d * d + 3 * d) + (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d)
    return (12 * d * d + 12 * d) + 2 * per_stream
