"""Patch embedding, positional encoding, and the loop-index embedding.

Token order is row-major over the patch grid: depth-major, then rows, then
columns for volumes, rows then columns for images. Within one patch the
flattened pixel order is channel-major, then depth, then row, then column,
so the linear patch projection is exactly a strided convolution.

Normalization order matters and is pinned: tokens are layer-normalized
first, the positional table is added after. Positions are encoded once at
embedding time; the per-iteration loop-index embedding is a separate,
narrow sinusoid added inside the recurrent core.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import LayerNorm, Linear, Module
from .rng import RngState
from .tensor import Tensor


@dataclass(frozen=True)
class PatchGrid:
    """Spatial geometry of the tokenization.

    2D uses image_size=(H, W), 3D uses image_size=(D, H, W) with a separate
    depth patch size. All extents must divide evenly; num_tokens is the
    product of the per-axis grid sizes.
    """

    image_size: tuple
    patch_size: int
    patch_size_z: int = 1
    in_channels: int = 1

    def __post_init__(self):
        if len(self.image_size) not in (2, 3):
            raise ConfigError(f"image_size must have 2 or 3 axes, got {self.image_size}")
        if self.patch_size <= 0 or self.patch_size_z <= 0:
            raise ConfigError("patch sizes must be positive")
        spatial = self.image_size[-2:]
        for s in spatial:
            if s % self.patch_size != 0:
                raise ConfigError(
                    f"image extent {s} not divisible by patch size {self.patch_size}"
                )
        if self.ndim == 3 and self.image_size[0] % self.patch_size_z != 0:
            raise ConfigError(
                f"depth {self.image_size[0]} not divisible by depth patch {self.patch_size_z}"
            )

    @property
    def ndim(self) -> int:
        return len(self.image_size)

    @property
    def grid_shape(self) -> tuple:
        if self.ndim == 2:
            h, w = self.image_size
            return (h // self.patch_size, w // self.patch_size)
        d, h, w = self.image_size
        return (d // self.patch_size_z, h // self.patch_size, w // self.patch_size)

    @property
    def num_tokens(self) -> int:
        return int(np.prod(self.grid_shape))

    @property
    def patch_voxels(self) -> int:
        per = self.patch_size**2
        if self.ndim == 3:
            per *= self.patch_size_z
        return self.in_channels * per


class PatchEmbed(Module):
    """Non-overlapping patchify + shared linear projection."""

    def __init__(self, grid: PatchGrid, dim: int, rng: RngState):
        self.proj = Linear(grid.patch_voxels, dim, rng)
        self._grid = grid

    def __call__(self, x: Tensor) -> Tensor:
        g = self._grid
        if x.shape[1] != g.in_channels or tuple(x.shape[2:]) != tuple(g.image_size):
            raise ShapeError(
                f"input shape {x.shape} does not match grid "
                f"(channels={g.in_channels}, size={g.image_size})"
            )
        b = x.shape[0]
        p = g.patch_size
        if g.ndim == 2:
            gh, gw = g.grid_shape
            x = x.reshape(b, g.in_channels, gh, p, gw, p)
            x = x.transpose(0, 2, 4, 1, 3, 5)
            x = x.reshape(b, gh * gw, g.patch_voxels)
        else:
            pz = g.patch_size_z
            gd, gh, gw = g.grid_shape
            x = x.reshape(b, g.in_channels, gd, pz, gh, p, gw, p)
            x = x.transpose(0, 2, 4, 6, 1, 3, 5, 7)
            x = x.reshape(b, gd * gh * gw, g.patch_voxels)
        return self.proj(x)


def _freq_ladder(d: int) -> np.ndarray:
    return 1.0 / np.power(10000.0, np.arange(d) / d)


def sinusoidal_pe(grid: PatchGrid, dim: int) -> np.ndarray:
    """Fixed positional table, shape (num_tokens, dim).

    2D: four blocks of dim/4 channels, [sin(w h), cos(w h), sin(w w'),
    cos(w w')]; dim must be divisible by 4. 3D: six blocks (sin/cos for
    h, w, d) each floor(dim/6) wide; a remainder is zero-filled so any dim
    >= 6 is accepted.
    """
    coords = np.stack(
        np.meshgrid(*[np.arange(s) for s in grid.grid_shape], indexing="ij"), axis=-1
    ).reshape(grid.num_tokens, grid.ndim)
    table = np.zeros((grid.num_tokens, dim))
    if grid.ndim == 2:
        if dim % 4 != 0:
            raise ConfigError(f"2D positional encoding needs dim divisible by 4, got {dim}")
        d = dim // 4
        w = _freq_ladder(d)
        blocks = [
            np.sin(coords[:, 0:1] * w),
            np.cos(coords[:, 0:1] * w),
            np.sin(coords[:, 1:2] * w),
            np.cos(coords[:, 1:2] * w),
        ]
    else:
        if dim < 6:
            raise ConfigError(f"3D positional encoding needs dim >= 6, got {dim}")
        d = dim // 6
        w = _freq_ladder(d)
        # axis order (h, w, d); token coords arrive as (d, h, w)
        blocks = []
        for axis in (1, 2, 0):
            blocks.append(np.sin(coords[:, axis : axis + 1] * w))
            blocks.append(np.cos(coords[:, axis : axis + 1] * w))
    filled = np.concatenate(blocks, axis=1)
    table[:, : filled.shape[1]] = filled
    return table


def loop_index_embed(t: int, dim: int) -> np.ndarray:
    """Sinusoid over the iteration counter, nonzero in the first dim//8
    channels only; the rest stay zero so the loop signal occupies a narrow,
    fixed slice of the feature space. Defined for any t >= 0, which is what
    lets the loop run past its training depth."""
    if t < 0:
        raise ConfigError(f"loop index must be non-negative, got {t}")
    emb = np.zeros(dim)
    active = dim // 8
    pairs = active // 2
    if pairs > 0:
        w = _freq_ladder(pairs)
        emb[0 : 2 * pairs : 2] = np.sin(w * t)
        emb[1 : 2 * pairs : 2] = np.cos(w * t)
    if active % 2 == 1:
        emb[active - 1] = np.sin(float(t))
    return emb


class TokenEmbedder(Module):
    """patchify -> LayerNorm -> + positional table (in that order)."""

    def __init__(self, grid: PatchGrid, dim: int, rng: RngState):
        self.patch = PatchEmbed(grid, dim, rng.spawn("patch"))
        self.norm = LayerNorm(dim)
        self._pe = sinusoidal_pe(grid, dim)
        self.grid = grid

    def __call__(self, x: Tensor) -> Tensor:
        tokens = self.norm(self.patch(x))
        return tokens + T.constant(self._pe, like=tokens)
