"""Multi-resolution hash grid encoding backed by numba kernels.

The encoding is linear in the feature table, so both the features and
their spatial Jacobian are exposed as torch autograd functions whose
backward pass scatters into the table gradient.  Positions never require
grad: the spatial gradient is produced explicitly by ``HashJacobian``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
import torch

PRIME_Y = 2654435761
PRIME_Z = 805459861
MASK32 = 0xFFFFFFFF


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 14
    features_per_level: int = 2
    base_resolution: int = 16
    finest_resolution: int = 2048
    table_size_log2: int = 19
    bound_radius: float = 1.0

    def __post_init__(self):
        if self.levels < 1 or self.features_per_level < 1:
            raise ValueError("levels and features_per_level must be positive")
        if self.bound_radius <= 0:
            raise ValueError("bound_radius must be positive")
        if self.levels > 1 and self.per_level_scale <= 1.0:
            raise ValueError("finest_resolution must exceed base_resolution")

    @property
    def per_level_scale(self) -> float:
        if self.levels == 1:
            return 2.0
        return math.exp(math.log(self.finest_resolution / self.base_resolution) / (self.levels - 1))

    @property
    def width(self) -> int:
        return self.levels * self.features_per_level

    def layout(self):
        """Per-level (resolution, dense flag, table offset) plus total rows."""
        table_size = 1 << self.table_size_log2
        res, dense, offsets = [], [], [0]
        for level in range(self.levels):
            r = int(math.floor(self.base_resolution * self.per_level_scale**level + 1e-9))
            n_vertices = (r + 1) ** 3
            is_dense = n_vertices <= table_size
            res.append(r)
            dense.append(is_dense)
            offsets.append(offsets[-1] + (n_vertices if is_dense else table_size))
        return (
            np.asarray(res, dtype=np.int64),
            np.asarray(dense, dtype=np.bool_),
            np.asarray(offsets, dtype=np.int64),
        )


@numba.njit(cache=True, inline="always")
def _axis(p, r):
    # p >= 0; ties on a cell face go to the lower-index cell
    i = int(p)
    if i > r - 1:
        i = r - 1
    elif i > 0 and i == p:
        i -= 1
    return i, p - i


@numba.njit(cache=True, inline="always")
def _corner_rows(ix, iy, iz, r, dense, size, off, rows):
    # corner c = (bx, by, bz) with bx the lowest bit
    if dense:
        s = r + 1
        b = off + ix + s * (iy + s * iz)
        b2 = b + s * s
        rows[0] = b
        rows[1] = b + 1
        rows[2] = b + s
        rows[3] = b + s + 1
        rows[4] = b2
        rows[5] = b2 + 1
        rows[6] = b2 + s
        rows[7] = b2 + s + 1
    else:
        m = size - 1
        y0 = (iy * PRIME_Y) & MASK32
        y1 = ((iy + 1) * PRIME_Y) & MASK32
        z0 = (iz * PRIME_Z) & MASK32
        z1 = ((iz + 1) * PRIME_Z) & MASK32
        x0 = ix
        x1 = ix + 1
        rows[0] = off + ((x0 ^ y0 ^ z0) & m)
        rows[1] = off + ((x1 ^ y0 ^ z0) & m)
        rows[2] = off + ((x0 ^ y1 ^ z0) & m)
        rows[3] = off + ((x1 ^ y1 ^ z0) & m)
        rows[4] = off + ((x0 ^ y0 ^ z1) & m)
        rows[5] = off + ((x1 ^ y0 ^ z1) & m)
        rows[6] = off + ((x0 ^ y1 ^ z1) & m)
        rows[7] = off + ((x1 ^ y1 ^ z1) & m)


@numba.njit(cache=True, inline="always")
def _level(u, n, lv, res, dense, offsets, rows, w):
    r = res[lv]
    ix, wx = _axis(u[n, 0] * r, r)
    iy, wy = _axis(u[n, 1] * r, r)
    iz, wz = _axis(u[n, 2] * r, r)
    _corner_rows(ix, iy, iz, r, dense[lv], offsets[lv + 1] - offsets[lv], offsets[lv], rows)
    ax = 1.0 - wx
    ay = 1.0 - wy
    az = 1.0 - wz
    w[0, 0] = ax
    w[0, 1] = wx
    w[1, 0] = ay
    w[1, 1] = wy
    w[2, 0] = az
    w[2, 1] = wz
    return r


@numba.njit(cache=True)
def _encode_forward(u, table, res, dense, offsets, n_feat, out):
    rows = np.empty(8, np.int64)
    w = np.empty((3, 2), np.float64)
    for n in range(u.shape[0]):
        for lv in range(res.shape[0]):
            _level(u, n, lv, res, dense, offsets, rows, w)
            for f in range(n_feat):
                acc = 0.0
                for c in range(8):
                    acc += w[0, c & 1] * w[1, (c >> 1) & 1] * w[2, c >> 2] * table[rows[c], f]
                out[n, lv * n_feat + f] = acc


@numba.njit(cache=True)
def _encode_backward(u, grad_out, res, dense, offsets, n_feat, grad_table):
    rows = np.empty(8, np.int64)
    w = np.empty((3, 2), np.float64)
    for n in range(u.shape[0]):
        for lv in range(res.shape[0]):
            _level(u, n, lv, res, dense, offsets, rows, w)
            for c in range(8):
                wc = w[0, c & 1] * w[1, (c >> 1) & 1] * w[2, c >> 2]
                for f in range(n_feat):
                    grad_table[rows[c], f] += wc * grad_out[n, lv * n_feat + f]


@numba.njit(cache=True)
def _jacobian_forward(u, table, res, dense, offsets, n_feat, scale, out):
    # out[n, k, a] = d enc_k / d x_a where du/dx = scale
    rows = np.empty(8, np.int64)
    w = np.empty((3, 2), np.float64)
    for n in range(u.shape[0]):
        for lv in range(res.shape[0]):
            k = _level(u, n, lv, res, dense, offsets, rows, w) * scale
            for f in range(n_feat):
                gx = 0.0
                gy = 0.0
                gz = 0.0
                for c in range(8):
                    bx = c & 1
                    by = (c >> 1) & 1
                    bz = c >> 2
                    t = table[rows[c], f]
                    gx += (k if bx else -k) * w[1, by] * w[2, bz] * t
                    gy += w[0, bx] * (k if by else -k) * w[2, bz] * t
                    gz += w[0, bx] * w[1, by] * (k if bz else -k) * t
                j = lv * n_feat + f
                out[n, j, 0] = gx
                out[n, j, 1] = gy
                out[n, j, 2] = gz


@numba.njit(cache=True)
def _jacobian_backward(u, grad_out, res, dense, offsets, n_feat, scale, grad_table):
    rows = np.empty(8, np.int64)
    w = np.empty((3, 2), np.float64)
    for n in range(u.shape[0]):
        for lv in range(res.shape[0]):
            k = _level(u, n, lv, res, dense, offsets, rows, w) * scale
            for c in range(8):
                bx = c & 1
                by = (c >> 1) & 1
                bz = c >> 2
                dx = (k if bx else -k) * w[1, by] * w[2, bz]
                dy = w[0, bx] * (k if by else -k) * w[2, bz]
                dz = w[0, bx] * w[1, by] * (k if bz else -k)
                for f in range(n_feat):
                    j = lv * n_feat + f
                    grad_table[rows[c], f] += dx * grad_out[n, j, 0] + dy * grad_out[n, j, 1] + dz * grad_out[n, j, 2]


class HashGrid:
    """Static layout of a hash grid; the feature table lives elsewhere."""

    def __init__(self, cfg: HashGridConfig):
        self.cfg = cfg
        self.res, self.dense, self.offsets = cfg.layout()
        self.n_rows = int(self.offsets[-1])

    def normalize(self, x: np.ndarray) -> np.ndarray:
        b = self.cfg.bound_radius
        if np.any(np.abs(x) > b * (1 + 1e-6)):
            raise ValueError("position outside the encoding bound")
        return np.clip((x + b) / (2 * b), 0.0, 1.0)

    def encode_np(self, x: np.ndarray, table: np.ndarray) -> np.ndarray:
        u = self.normalize(np.asarray(x, dtype=table.dtype).reshape(-1, 3))
        out = np.empty((u.shape[0], self.cfg.width), dtype=table.dtype)
        _encode_forward(u, table, self.res, self.dense, self.offsets, self.cfg.features_per_level, out)
        return out

    def jacobian_np(self, x: np.ndarray, table: np.ndarray) -> np.ndarray:
        u = self.normalize(np.asarray(x, dtype=table.dtype).reshape(-1, 3))
        out = np.empty((u.shape[0], self.cfg.width, 3), dtype=table.dtype)
        scale = 1.0 / (2 * self.cfg.bound_radius)
        _jacobian_forward(u, table, self.res, self.dense, self.offsets, self.cfg.features_per_level, scale, out)
        return out


class HashEncode(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, table, grid):
        table_np = table.detach().numpy()
        u = grid.normalize(x.detach().numpy().astype(table_np.dtype, copy=False))
        out = np.empty((u.shape[0], grid.cfg.width), dtype=table_np.dtype)
        _encode_forward(u, table_np, grid.res, grid.dense, grid.offsets, grid.cfg.features_per_level, out)
        ctx.u = u
        ctx.grid = grid
        ctx.table_shape = table.shape
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, grad_out):
        grid = ctx.grid
        g = np.ascontiguousarray(grad_out.detach().numpy())
        grad_table = np.zeros(ctx.table_shape, dtype=g.dtype)
        _encode_backward(ctx.u, g, grid.res, grid.dense, grid.offsets, grid.cfg.features_per_level, grad_table)
        return None, torch.from_numpy(grad_table), None


class HashJacobian(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, table, grid):
        table_np = table.detach().numpy()
        u = grid.normalize(x.detach().numpy().astype(table_np.dtype, copy=False))
        out = np.empty((u.shape[0], grid.cfg.width, 3), dtype=table_np.dtype)
        scale = 1.0 / (2 * grid.cfg.bound_radius)
        _jacobian_forward(u, table_np, grid.res, grid.dense, grid.offsets, grid.cfg.features_per_level, scale, out)
        ctx.u = u
        ctx.grid = grid
        ctx.scale = scale
        ctx.table_shape = table.shape
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, grad_out):
        grid = ctx.grid
        g = np.ascontiguousarray(grad_out.detach().numpy())
        grad_table = np.zeros(ctx.table_shape, dtype=g.dtype)
        _jacobian_backward(
            ctx.u, g, grid.res, grid.dense, grid.offsets, grid.cfg.features_per_level, ctx.scale, grad_table
        )
        return None, torch.from_numpy(grad_table), None
