"""Axial two-dimensional rotary position embeddings.

Channel pairs ``(2j, 2j+1)`` of each head are rotated. The first half of the
pairs is driven by the token's row index, the second half by its column
index, each with frequencies ``base ** (-2i / (head_dim / 2))``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .nn_core import ConfigError

DEFAULT_BASE = 100.0


@dataclass(frozen=True)
class RopeTable:
    grid_h: int
    grid_w: int
    head_dim: int
    base: float
    angles: np.ndarray  # [grid_h, grid_w, head_dim // 2], float64

    @property
    def n_pairs(self) -> int:
        return self.head_dim // 2

    def position_angles(self, positions: Sequence[tuple[int, int]]) -> np.ndarray:
        pos = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
        rows, cols = pos[:, 0], pos[:, 1]
        if (rows < 0).any() or (rows >= self.grid_h).any() or (cols < 0).any() or (cols >= self.grid_w).any():
            raise ValueError(f"position outside {self.grid_h}x{self.grid_w} grid: {pos.tolist()}")
        return self.angles[rows, cols]

    def grid_angles(self) -> np.ndarray:
        """Angles for the full grid in row-major token order, ``[H*W, pairs]``."""
        return self.angles.reshape(-1, self.n_pairs)


def axis_frequencies(head_dim: int, base: float) -> np.ndarray:
    quarter = head_dim // 4
    i = np.arange(quarter, dtype=np.float64)
    return base ** (-2.0 * i / (head_dim / 2))


def build_rope_table(grid_h: int, grid_w: int, head_dim: int, base: float = DEFAULT_BASE) -> RopeTable:
    if grid_h < 1 or grid_w < 1:
        raise ConfigError(f"grid extents must be >= 1, got {grid_h}x{grid_w}")
    if head_dim % 4:
        raise ConfigError(f"head_dim {head_dim} must be divisible by 4 for axial 2D RoPE")
    if not base > 1:
        raise ConfigError(f"rope base must exceed 1, got {base}")
    freqs = axis_frequencies(head_dim, base)
    rows = np.arange(grid_h, dtype=np.float64)[:, None, None] * freqs
    cols = np.arange(grid_w, dtype=np.float64)[None, :, None] * freqs
    angles = np.concatenate(
        [np.broadcast_to(rows, (grid_h, grid_w, freqs.size)), np.broadcast_to(cols, (grid_h, grid_w, freqs.size))],
        axis=-1,
    )
    angles = np.ascontiguousarray(angles)
    angles.setflags(write=False)
    return RopeTable(grid_h, grid_w, head_dim, float(base), angles)


@lru_cache(maxsize=64)
def cached_table(grid_h: int, grid_w: int, head_dim: int, base: float) -> RopeTable:
    return build_rope_table(grid_h, grid_w, head_dim, base)


def rotate(vectors: np.ndarray, angles: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Rotate channel pairs of ``vectors [..., N, D]`` by ``angles [N, D/2]``."""
    cos = np.cos(angles).astype(vectors.dtype, copy=False)
    sin = np.sin(angles).astype(vectors.dtype, copy=False)
    if inverse:
        sin = -sin
    x0 = vectors[..., 0::2]
    x1 = vectors[..., 1::2]
    out = np.empty_like(vectors)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def apply_rope(vectors: np.ndarray, table: RopeTable, positions: Sequence[tuple[int, int]]) -> np.ndarray:
    if vectors.shape[-1] != table.head_dim:
        raise ValueError(f"vector dim {vectors.shape[-1]} != table head_dim {table.head_dim}")
    angles = table.position_angles(positions)
    if angles.shape[0] != vectors.shape[-2]:
        raise ValueError(f"{angles.shape[0]} positions for {vectors.shape[-2]} vectors")
    return rotate(vectors, angles)


def grid_rope(table: RopeTable):
    """(rotate, unrotate) pair over every grid token in row-major order."""
    angles = table.grid_angles()
    return (lambda v: rotate(v, angles), lambda g: rotate(g, angles, inverse=True))
