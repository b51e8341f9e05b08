"""Patch geometry, per-patch targets and fixed sine-cosine position tables."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import NORM_EPS, ShapeError, Tensor, linear, permute, reshape

_AXIS_NAMES = ("z", "y", "x")


@dataclass(frozen=True)
class PatchGrid:
    """Patchification geometry for ``[B, C, *spatial]`` inputs (2D or 3D).

    ``spatial`` is given in array axis order, e.g. ``(D, H, W)`` for volumes.
    """

    spatial: tuple[int, ...]
    channels: int
    patch_edge: int

    def __post_init__(self):
        object.__setattr__(self, "spatial", tuple(int(s) for s in self.spatial))
        if len(self.spatial) not in (2, 3):
            raise ValueError(f"PatchGrid supports 2D or 3D inputs, got spatial={self.spatial}")
        if self.patch_edge < 1 or self.channels < 1:
            raise ValueError("patch_edge and channels must be positive")
        names = _AXIS_NAMES[-len(self.spatial):]
        for name, n in zip(names, self.spatial):
            if n % self.patch_edge:
                raise ValueError(f"spatial axis {name} (extent {n}) is not divisible by patch edge {self.patch_edge}")

    @property
    def dims(self) -> int:
        return len(self.spatial)

    @property
    def grid(self) -> tuple[int, ...]:
        return tuple(n // self.patch_edge for n in self.spatial)

    @property
    def token_count(self) -> int:
        return math.prod(self.grid)

    @property
    def patch_dim(self) -> int:
        return self.patch_edge**self.dims * self.channels

    def to_dict(self) -> dict:
        return {"spatial": list(self.spatial), "channels": self.channels, "patch_edge": self.patch_edge}

    @classmethod
    def from_dict(cls, d: dict) -> "PatchGrid":
        return cls(tuple(d["spatial"]), int(d["channels"]), int(d["patch_edge"]))


def _check_input(x_shape: tuple[int, ...], grid: PatchGrid) -> None:
    if len(x_shape) != grid.dims + 2 or x_shape[1] != grid.channels:
        raise ShapeError(f"input shape {x_shape} does not match grid (C={grid.channels}, spatial={grid.spatial})")
    names = _AXIS_NAMES[-grid.dims:]
    for name, n, want in zip(names, x_shape[2:], grid.spatial):
        if n % grid.patch_edge:
            raise ShapeError(f"axis {name} of extent {n} is not divisible by patch edge {grid.patch_edge}")
        if n != want:
            raise ShapeError(f"axis {name} has extent {n}, grid expects {want}")


def _split_shape(b: int, grid: PatchGrid) -> tuple[int, ...]:
    p = grid.patch_edge
    shape = [b, grid.channels]
    for g in grid.grid:
        shape += [g, p]
    return tuple(shape)


def _patch_perm(dims: int) -> tuple[int, ...]:
    # [B, C, g0, p0, g1, p1, (g2, p2)] -> [B, g0, g1, (g2), p0, p1, (p2), C]
    grid_axes = [2 + 2 * i for i in range(dims)]
    patch_axes = [3 + 2 * i for i in range(dims)]
    return tuple([0] + grid_axes + patch_axes + [1])


def patchify(x: Tensor | np.ndarray, grid: PatchGrid):
    """``[B, C, *spatial] -> [B, N, patch_dim]``.

    Tokens are ranked row-major over the grid; inside a patch values run
    spatial-row-major with channel fastest, i.e. ``(z, y, x, c)``.
    Works on tensors (differentiable) and plain arrays.
    """
    shape = tuple(x.shape)
    _check_input(shape, grid)
    b = shape[0]
    perm = _patch_perm(grid.dims)
    if isinstance(x, Tensor):
        return reshape(permute(reshape(x, _split_shape(b, grid)), perm), (b, grid.token_count, grid.patch_dim))
    arr = np.asarray(x).reshape(_split_shape(b, grid)).transpose(perm)
    return np.ascontiguousarray(arr).reshape(b, grid.token_count, grid.patch_dim)


def unpatchify(tokens: Tensor | np.ndarray, grid: PatchGrid):
    """Exact inverse of :func:`patchify`."""
    shape = tuple(tokens.shape)
    if len(shape) != 3 or shape[1] != grid.token_count or shape[2] != grid.patch_dim:
        raise ShapeError(
            f"tokens of shape {shape} do not match grid (N={grid.token_count}, patch_dim={grid.patch_dim})"
        )
    b, p, d = shape[0], grid.patch_edge, grid.dims
    inner = tuple(grid.grid) + (p,) * d + (grid.channels,)
    inv = tuple(np.argsort(_patch_perm(d)))
    out_shape = (b, grid.channels) + grid.spatial
    if isinstance(tokens, Tensor):
        return reshape(permute(reshape(tokens, (b,) + inner), inv), out_shape)
    arr = np.asarray(tokens).reshape((b,) + inner).transpose(inv)
    return np.ascontiguousarray(arr).reshape(out_shape)


def per_patch_normalize(tokens: np.ndarray, eps: float = NORM_EPS):
    """Standardise each token over its patch values (population variance).

    Returns ``(targets, mean, var)`` with ``mean``/``var`` of shape ``[B, N, 1]``.
    """
    tokens = np.asarray(tokens)
    mean = tokens.mean(axis=-1, keepdims=True)
    var = tokens.var(axis=-1, keepdims=True)
    targets = (tokens - mean) / np.sqrt(var + tokens.dtype.type(eps))
    return targets.astype(tokens.dtype, copy=False), mean, var


def denormalize(targets: np.ndarray, mean: np.ndarray, var: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    return targets * np.sqrt(var + np.asarray(targets).dtype.type(eps)) + mean


def sincos_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    """Interleaved table: column ``2i`` is ``sin(pos / 10000**(2i/dim))``, ``2i+1`` the cosine."""
    if dim % 2:
        raise ValueError(f"1D sine-cosine table needs an even width, got {dim}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    omega = 1.0 / 10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim)
    ang = pos * omega
    out = np.empty((pos.shape[0], dim), dtype=np.float64)
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def sincos_pos_embed(
    grid: PatchGrid | int | tuple[int, ...],
    embed_dim: int,
    cls_token: bool = False,
    dtype=np.float32,
    pad: bool = False,
) -> np.ndarray:
    """Fixed position table ``[N(+1), embed_dim]``.

    ``grid`` is a :class:`PatchGrid`, a token grid shape, or a sequence length.
    Each axis gets an equal share of the features; per-axis tables are
    concatenated in grid-axis order. An all-zero class-token row is prepended
    when ``cls_token`` is set. With ``pad`` a width that does not split
    evenly uses the largest even split and leaves trailing columns at zero.
    """
    if isinstance(grid, PatchGrid):
        shape = grid.grid
    elif isinstance(grid, int):
        shape = (grid,)
    else:
        shape = tuple(grid)
    dims = len(shape)
    if embed_dim % (2 * dims) and not pad:
        raise ValueError(f"embed_dim {embed_dim} must be divisible by {2 * dims} for a {dims}D grid")
    d_axis = 2 * (embed_dim // (2 * dims))
    if d_axis == 0:
        raise ValueError(f"embed_dim {embed_dim} is too small for a {dims}D grid")
    coords = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij"), axis=-1).reshape(-1, dims)
    table = np.concatenate([sincos_1d(coords[:, a], d_axis) for a in range(dims)], axis=1)
    if table.shape[1] < embed_dim:
        table = np.concatenate([table, np.zeros((table.shape[0], embed_dim - table.shape[1]))], axis=1)
    if cls_token:
        table = np.concatenate([np.zeros((1, embed_dim)), table], axis=0)
    return table.astype(dtype)


def patch_embed(tokens: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    """Per-token affine projection ``[B, N, patch_dim] -> [B, N, embed_dim]``."""
    if tokens.shape[-1] != w.shape[0]:
        raise ShapeError(f"patch_embed: tokens {tokens.shape} do not match weight {w.shape}")
    return linear(tokens, w, b)
