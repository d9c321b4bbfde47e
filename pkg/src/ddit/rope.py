"""Rotary position embeddings: 1D sequential and 2D axial variants.

Vectors are rotated pairwise: consecutive coordinates (x[2i], x[2i+1]) form
a plane rotated by angle position * frequency_i.  The 2D axial form splits
the rotated dimensions in half, rotating the first half by the row index
and the second half by the column index, each with its own frequency table
over the same base.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class RopeTable:
    """Frequency table for one rotation axis.

    d_rot is the number of dimensions rotated along this axis (d_rot/2
    rotation planes); base is the geometric wavelength base.
    """

    d_rot: int
    base: float = 10000.0

    def __post_init__(self):
        if self.d_rot <= 0 or self.d_rot % 2 != 0:
            raise ConfigError(f"rotated dims must be even and positive, got {self.d_rot}")
        if self.base <= 1.0:
            raise ConfigError(f"rope base must exceed 1, got {self.base}")

    def frequencies(self, dtype: torch.dtype = torch.float64) -> torch.Tensor:
        """Strictly decreasing inverse wavelengths base^(-2i/d_rot), i in [0, d_rot/2)."""
        i = torch.arange(self.d_rot // 2, dtype=torch.float64)
        freqs = torch.exp(-math.log(self.base) * 2.0 * i / self.d_rot)
        return freqs.to(dtype)


def rotate_pairs(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate even/odd coordinate pairs of x by the given per-plane angles.

    x: (..., n, d); cos/sin broadcastable to (..., n, d//2).
    """
    x_even = x[..., 0::2]
    x_odd = x[..., 1::2]
    out_even = x_even * cos - x_odd * sin
    out_odd = x_even * sin + x_odd * cos
    return torch.stack((out_even, out_odd), dim=-1).flatten(-2)


def angles_1d(positions: torch.Tensor, table: RopeTable, dtype: torch.dtype) -> torch.Tensor:
    """Per-plane rotation angles position * frequency_i, shape (..., n, d_rot//2)."""
    freqs = table.frequencies(dtype)
    return positions.to(dtype).unsqueeze(-1) * freqs


def apply_rope_1d(x: torch.Tensor, positions: torch.Tensor, table: RopeTable) -> torch.Tensor:
    """Rotate per-head vectors by scalar sequence positions.

    x: (..., n, d) with d == table.d_rot; positions: (n,) or broadcastable
    to x's leading dims.
    """
    if x.shape[-1] != table.d_rot:
        raise ConfigError(
            f"head dim {x.shape[-1]} does not match table d_rot {table.d_rot} (must be even)"
        )
    if positions.shape[-1] != x.shape[-2]:
        raise ShapeError(f"{positions.shape[-1]} positions for {x.shape[-2]} tokens")
    ang = angles_1d(positions, table, x.dtype)
    return rotate_pairs(x, torch.cos(ang), torch.sin(ang))


def apply_rope_2d(x: torch.Tensor, positions: torch.Tensor, table: RopeTable) -> torch.Tensor:
    """Rotate per-head vectors by (row, col) grid positions, axially.

    x: (..., n, d) with d == 2 * table.d_rot; the first d/2 dims rotate with
    the row index, the second d/2 with the column index.  positions: (n, 2).
    """
    if x.shape[-1] != 2 * table.d_rot:
        raise ConfigError(
            f"head dim {x.shape[-1]} not divisible into two axes of {table.d_rot} dims "
            "(head dim must be divisible by 4)"
        )
    if positions.ndim != 2 or positions.shape[-1] != 2:
        raise ShapeError(f"2D positions must have shape (n, 2), got {tuple(positions.shape)}")
    if positions.shape[0] != x.shape[-2]:
        raise ShapeError(f"{positions.shape[0]} positions for {x.shape[-2]} tokens")
    half = table.d_rot
    ang_row = angles_1d(positions[:, 0], table, x.dtype)
    ang_col = angles_1d(positions[:, 1], table, x.dtype)
    row = rotate_pairs(x[..., :half], torch.cos(ang_row), torch.sin(ang_row))
    col = rotate_pairs(x[..., half:], torch.cos(ang_col), torch.sin(ang_col))
    return torch.cat((row, col), dim=-1)


def grid_positions(rows: int, cols: int) -> torch.Tensor:
    """Row-major (row, col) indices for a patch grid, shape (rows*cols, 2)."""
    r = torch.arange(rows).repeat_interleave(cols)
    c = torch.arange(cols).repeat(rows)
    return torch.stack((r, c), dim=-1)
