"""Non-tokenized conditioning: timestep, caption, and modality embeddings.

The three embedders share one output width D and their sum forms the global
conditioning vector that drives all adaptive-norm modulation.  Discrete
denoising steps are embedded as raw step values; continuous flow times are
multiplied by RFM_TIME_SCALE first so both objectives share one embedder
range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .errors import ConfigError, InputError

NULL_TOKEN = 0

# Continuous flow time in [0, 1] is scaled by this factor before the
# sinusoid, aligning it with discrete steps 1..1000.
RFM_TIME_SCALE = 1000.0


def sinusoidal_features(t: Tensor, dim: int, base: float = 10000.0) -> Tensor:
    """Raw sinusoidal features [sin | cos] at geometric frequencies base^(-2i/dim).

    t: (B,) nonnegative times; returns (B, dim).  At t=0 every sin component
    is 0 and every cos component is 1.
    """
    if dim % 2 != 0:
        raise ConfigError(f"sinusoidal feature dim must be even, got {dim}")
    half = dim // 2
    dtype = t.dtype if t.is_floating_point() else torch.float32
    i = torch.arange(half, dtype=torch.float64)
    freqs = torch.exp(-math.log(base) * 2.0 * i / dim).to(dtype)
    args = t.to(dtype).unsqueeze(-1) * freqs
    return torch.cat((torch.sin(args), torch.cos(args)), dim=-1)


class TimestepEmbedder(nn.Module):
    """Sinusoidal features followed by a two-layer projection to width dim."""

    def __init__(self, freq_dim: int, dim: int):
        super().__init__()
        if freq_dim % 2 != 0:
            raise ConfigError(f"freq_dim must be even, got {freq_dim}")
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: Tensor) -> Tensor:
        return self.mlp(sinusoidal_features(t, self.freq_dim))


@dataclass
class CaptionEncoding:
    """Token-level and pooled caption representations.

    sequence: (B, L, D_text); pooled: (B, D_text).  pooled is a fixed
    deterministic function (mean over positions, then a linear map) of the
    sequence.
    """

    sequence: Tensor
    pooled: Tensor

    @property
    def length(self) -> int:
        return self.sequence.shape[-2]

    def repeat(self, n: int) -> "CaptionEncoding":
        """Tile a batch-of-one encoding to batch size n (view, no copy)."""
        return CaptionEncoding(
            sequence=self.sequence.expand(n, -1, -1),
            pooled=self.pooled.expand(n, -1),
        )


class CaptionEncoder(nn.Module):
    """Toy text encoder: embedding table plus learned 1D positions.

    Captions shorter than max_len are padded with the null token, so the
    all-null caption is the designated unconditional encoding.
    """

    def __init__(self, vocab_size: int, dim: int, max_len: int):
        super().__init__()
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.tokens = nn.Embedding(vocab_size, dim)
        self.positions = nn.Parameter(torch.zeros(max_len, dim))
        self.pool_proj = nn.Linear(dim, dim)

    def forward(self, token_ids: Tensor) -> CaptionEncoding:
        if token_ids.ndim == 1:
            token_ids = token_ids.unsqueeze(0)
        if token_ids.shape[1] > self.max_len:
            raise InputError(f"caption length {token_ids.shape[1]} exceeds max {self.max_len}")
        if token_ids.numel() and int(token_ids.max()) >= self.vocab_size:
            raise InputError(f"token id {int(token_ids.max())} outside vocabulary")
        if token_ids.numel() and int(token_ids.min()) < 0:
            raise InputError("negative token id")
        if token_ids.shape[1] < self.max_len:
            pad = torch.full(
                (token_ids.shape[0], self.max_len - token_ids.shape[1]),
                NULL_TOKEN,
                dtype=token_ids.dtype,
            )
            token_ids = torch.cat((token_ids, pad), dim=1)
        seq = self.tokens(token_ids) + self.positions
        pooled = self.pool_proj(seq.mean(dim=1))
        return CaptionEncoding(sequence=seq, pooled=pooled)

    def null_encoding(self, batch: int = 1) -> CaptionEncoding:
        return self.forward(torch.full((batch, self.max_len), NULL_TOKEN, dtype=torch.long))


class ModalityEmbedder(nn.Module):
    """Lookup mapping a discrete spatial-condition flag to a dense vector."""

    def __init__(self, n_modalities: int, dim: int):
        super().__init__()
        self.n_modalities = n_modalities
        self.table = nn.Embedding(n_modalities, dim)

    def forward(self, m: Tensor) -> Tensor:
        if m.numel() and not (0 <= int(m.min()) and int(m.max()) < self.n_modalities):
            raise InputError(f"modality flag outside [0, {self.n_modalities})")
        return self.table(m)


class PooledCaptionEmbedder(nn.Module):
    """Two-layer perceptron bridging the pooled caption width to D."""

    def __init__(self, text_dim: int, dim: int):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(text_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, pooled: Tensor) -> Tensor:
        return self.mlp(pooled)


@dataclass
class GlobalConditioning:
    """Summed conditioning vector with its three addends kept for introspection."""

    vector: Tensor
    timestep: Tensor
    caption: Tensor
    modality: Tensor


class GlobalConditioner(nn.Module):
    """Combines timestep, pooled-caption, and modality embeddings by exact sum."""

    def __init__(self, freq_dim: int, text_dim: int, dim: int, n_modalities: int = 2):
        super().__init__()
        self.dim = dim
        self.time_embed = TimestepEmbedder(freq_dim, dim)
        self.caption_embed = PooledCaptionEmbedder(text_dim, dim)
        self.modality_embed = ModalityEmbedder(n_modalities, dim)

    def forward(self, t: Tensor, caption: CaptionEncoding, m: Tensor) -> GlobalConditioning:
        t_emb = self.time_embed(t)
        c_emb = self.caption_embed(caption.pooled)
        m_emb = self.modality_embed(m)
        if not (t_emb.shape == c_emb.shape == m_emb.shape):
            raise ConfigError(
                f"conditioning widths disagree: {t_emb.shape} / {c_emb.shape} / {m_emb.shape}"
            )
        return GlobalConditioning(
            vector=t_emb + c_emb + m_emb, timestep=t_emb, caption=c_emb, modality=m_emb
        )
