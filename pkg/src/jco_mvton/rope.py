"""Axial 2D rotary embeddings and the joint position layouts for try-on.

Positions are in patch-grid units, 0-based, with exclusive upper bounds: a
noise grid of ``Hn`` rows uses rows ``0 .. Hn-1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError


class PosScheme(str, Enum):
    # every segment in its own column block
    I = "I"  # noqa: E741
    # noise and reference share coordinates, garment concatenated to the right
    II = "II"


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    theta: float = 10000.0

    def __post_init__(self):
        if self.head_dim % 2:
            raise ContractError(f"head_dim must be even, got {self.head_dim}")
        if self.head_dim % 4:
            raise ContractError(f"head_dim must split into two rotated halves, got {self.head_dim}")

    @property
    def half(self) -> int:
        return self.head_dim // 2


def _grid(rows: int, cols: int, row0: int = 0, col0: int = 0) -> np.ndarray:
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return np.stack([r.reshape(-1) + row0, c.reshape(-1) + col0], axis=1).astype(np.int64)


@dataclass(frozen=True)
class PositionGrid:
    """Per-token (row, col) coordinates for the segments T, X, C1, C2."""

    text: np.ndarray
    noise: np.ndarray
    ref: np.ndarray
    garment: np.ndarray

    @property
    def coords(self) -> np.ndarray:
        return np.concatenate([self.text, self.noise, self.ref, self.garment], axis=0)

    def __len__(self) -> int:
        return len(self.coords)


def build_positions(scheme, noise_grid, ref_grid, garment_grid, text_len: int) -> PositionGrid:
    scheme = PosScheme(scheme)
    hn, wn = noise_grid
    hr, wr = ref_grid
    hg, wg = garment_grid
    if scheme is PosScheme.II:
        if (hn, wn) != (hr, wr):
            raise ContractError(f"scheme II needs matching noise/reference grids, got {noise_grid} vs {ref_grid}")
        noise = _grid(hn, wn)
        ref = _grid(hr, wr)
        garment = _grid(hg, wg, col0=wn)
    else:
        noise = _grid(hn, wn)
        ref = _grid(hr, wr, col0=wn)
        garment = _grid(hg, wg, col0=wn + wr)
    text_row = max(hn, hr, hg)
    text = _grid(1, text_len, row0=text_row)
    return PositionGrid(text=text, noise=noise, ref=ref, garment=garment)


def rope_angles(coords: np.ndarray, cfg: RopeConfig) -> np.ndarray:
    """Angle per (token, feature); both members of a rotated pair share it."""
    coords = np.asarray(coords, dtype=np.float64)
    pairs = cfg.half // 2
    freqs = cfg.theta ** (-2.0 * np.arange(pairs) / cfg.half)
    row = coords[:, :1] * freqs
    col = coords[:, 1:2] * freqs
    angles = np.concatenate([row, col], axis=1)
    return np.repeat(angles, 2, axis=1)


def _pair_swap(head_dim: int, dtype) -> np.ndarray:
    # v @ R maps (v0, v1) -> (-v1, v0) within each pair
    r = np.zeros((head_dim, head_dim), dtype=dtype)
    for j in range(0, head_dim, 2):
        r[j + 1, j] = -1.0
        r[j, j + 1] = 1.0
    return r


def apply_rope(x, coords, cfg: RopeConfig) -> Tensor:
    """Rotate (..., L, head_dim) query/key vectors by their 2D positions.

    The first half of each head rotates with the row coordinate, the second
    half with the column coordinate.
    """
    x = ad.as_tensor(x)
    if x.shape[-1] != cfg.head_dim:
        raise ContractError(f"head_dim {x.shape[-1]} != configured {cfg.head_dim}")
    coords = coords.coords if isinstance(coords, PositionGrid) else np.asarray(coords)
    if len(coords) != x.shape[-2]:
        raise ContractError(f"{len(coords)} positions for {x.shape[-2]} tokens")
    angles = rope_angles(coords, cfg)
    cos = np.cos(angles).astype(x.dtype)
    sin = np.sin(angles).astype(x.dtype)
    swapped = ad.matmul(x, _pair_swap(cfg.head_dim, x.dtype))
    return ad.add(ad.mul(x, cos), ad.mul(swapped, sin))
