"""Exactly invertible latent codecs standing in for a learned autoencoder.

The haar codec applies an orthonormal 2x2 Haar analysis per level: every
level maps (C, H, W) to (4C, H/2, W/2) while preserving the sum of squares,
so decode(encode(x)) == x up to roundoff and the latent is a genuine
spatially-downsampled multi-channel representation.  The pixel codec is the
identity.  A scalar scaling factor is applied at encode and removed at
decode.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import toydata
from .errors import ConfigError, PersistenceError, ShapeError

IMAGE_CHANNELS = 3


@dataclass(frozen=True)
class CodecConfig:
    kind: str = "haar"
    levels: int = 2
    scaling: float = 1.0

    def __post_init__(self):
        if self.kind not in ("pixel", "haar"):
            raise ConfigError(f"unknown codec kind {self.kind!r}")
        if self.levels < 0:
            raise ConfigError(f"levels must be >= 0, got {self.levels}")
        if self.kind == "pixel" and self.levels != 0:
            raise ConfigError("pixel codec requires levels=0")
        if not self.scaling > 0:
            raise ConfigError(f"scaling must be positive, got {self.scaling}")


def haar_forward_level(x: torch.Tensor) -> torch.Tensor:
    """One orthonormal analysis level: (..., C, H, W) -> (..., 4C, H/2, W/2).

    Output channel blocks are ordered [LL, LH, HL, HH] over the input
    channels; a constant image of value v yields LL = 2v and zero details.
    """
    h, w = x.shape[-2], x.shape[-1]
    if h % 2 or w % 2:
        raise ShapeError(f"spatial dims must be even for a haar level, got {h}x{w}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    ll = (a + b + c + d) / 2
    lh = (a - b + c - d) / 2
    hl = (a + b - c - d) / 2
    hh = (a - b - c + d) / 2
    return torch.cat((ll, lh, hl, hh), dim=-3)


def haar_inverse_level(z: torch.Tensor) -> torch.Tensor:
    """Inverse of haar_forward_level: (..., 4C, h, w) -> (..., C, 2h, 2w)."""
    if z.shape[-3] % 4:
        raise ShapeError(f"channel count {z.shape[-3]} not divisible by 4")
    ll, lh, hl, hh = torch.chunk(z, 4, dim=-3)
    a = (ll + lh + hl + hh) / 2
    b = (ll - lh + hl - hh) / 2
    c = (ll + lh - hl - hh) / 2
    d = (ll - lh - hl + hh) / 2
    top = torch.stack((a, b), dim=-1).flatten(-2)
    bottom = torch.stack((c, d), dim=-1).flatten(-2)
    return torch.stack((top, bottom), dim=-2).flatten(-3, -2)


class LatentCodec:
    """Common scaling/validation wrapper around an invertible transform."""

    def __init__(self, config: CodecConfig):
        self.config = config
        self.levels = config.levels
        self.scaling = config.scaling

    @property
    def channels(self) -> int:
        return IMAGE_CHANNELS * 4**self.levels

    @property
    def spatial_factor(self) -> int:
        return 2**self.levels

    def latent_shape(self, height: int, width: int) -> tuple[int, int, int]:
        f = self.spatial_factor
        if height % f or width % f:
            raise ShapeError(f"image {height}x{width} not divisible by {f}")
        return (self.channels, height // f, width // f)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        """(..., 3, H, W) -> (..., channels, H/2^levels, W/2^levels), scaled."""
        if image.shape[-3] != IMAGE_CHANNELS:
            raise ShapeError(f"expected {IMAGE_CHANNELS} channels, got {image.shape[-3]}")
        self.latent_shape(image.shape[-2], image.shape[-1])
        z = image
        for _ in range(self.levels):
            z = haar_forward_level(z)
        return z * self.scaling if self.scaling != 1.0 else z

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        """Exact inverse of encode up to floating-point roundoff."""
        if latent.shape[-3] != self.channels:
            raise ShapeError(f"expected {self.channels} latent channels, got {latent.shape[-3]}")
        x = latent / self.scaling if self.scaling != 1.0 else latent
        for _ in range(self.levels):
            x = haar_inverse_level(x)
        return x


def make_codec(config: CodecConfig) -> LatentCodec:
    return LatentCodec(config)


def image_to_float(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [-1, 1]."""
    x = torch.from_numpy(np.array(image, copy=True)).float()
    return (x / 127.5 - 1.0).permute(2, 0, 1)


def float_to_image(x: torch.Tensor) -> np.ndarray:
    """(3, H, W) float in [-1, 1] -> (H, W, 3) uint8, clamped."""
    x = x.detach().float().clamp(-1.0, 1.0)
    x = ((x + 1.0) * 127.5).round().to(torch.uint8)
    return x.permute(1, 2, 0).numpy()


def encode_condition(codec: LatentCodec, raster: np.ndarray, modality: int) -> torch.Tensor:
    """Encode a spatial condition through the image codec.

    Masks (modality 0) are rasterized with the canonical class colors;
    sketches (modality 1) become {0,255} grayscale replicated to RGB.
    """
    if modality == 0:
        rgb = toydata.mask_to_rgb(raster)
    elif modality == 1:
        rgb = toydata.sketch_to_rgb(raster)
    else:
        raise ConfigError(f"unknown modality {modality}")
    return codec.encode(image_to_float(rgb))


_LAT_MAGIC = "LAT1"
_LAT_DTYPES = {"f4": torch.float32, "f8": torch.float64}
_LAT_CODES = {torch.float32: "f4", torch.float64: "f8"}


def write_latent(path, latent: torch.Tensor) -> None:
    """Cache one latent as a raw tensor file: text header (dtype, c, h, w) + payload."""
    if latent.ndim != 3:
        raise ShapeError(f"latent files hold (c, h, w) tensors, got ndim={latent.ndim}")
    code = _LAT_CODES.get(latent.dtype)
    if code is None:
        raise ConfigError(f"unsupported latent dtype {latent.dtype}")
    c, h, w = latent.shape
    header = f"{_LAT_MAGIC} {code} {c} {h} {w}\n".encode("ascii")
    payload = latent.detach().contiguous().numpy().astype(f"<{code}").tobytes()
    try:
        Path(path).write_bytes(header + payload)
    except OSError as exc:
        raise PersistenceError(f"cannot write latent file {path}: {exc}") from exc


def read_latent(path) -> torch.Tensor:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise PersistenceError(f"cannot read latent file {path}: {exc}") from exc
    newline = blob.index(b"\n")
    fields = blob[:newline].decode("ascii").split()
    if len(fields) != 5 or fields[0] != _LAT_MAGIC:
        raise PersistenceError(f"malformed latent header in {path}")
    code, c, h, w = fields[1], int(fields[2]), int(fields[3]), int(fields[4])
    if code not in _LAT_DTYPES:
        raise PersistenceError(f"unsupported dtype {code!r} in {path}")
    arr = np.frombuffer(blob[newline + 1 :], dtype=f"<{code}").reshape(c, h, w)
    return torch.from_numpy(arr.copy()).to(_LAT_DTYPES[code])
