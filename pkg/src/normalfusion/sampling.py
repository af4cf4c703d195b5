"""Occupancy grid and patch-based plane marching.

The centre ray of each pixel patch is marched on a regular lattice of
step ``h`` through occupied cells; every other ray of the patch is
sampled where it meets the same plane parallel to the image plane, so
that the nine points of each sample share a camera depth.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numba
import numpy as np
import torch
from scipy.ndimage import maximum_filter

from .geometry import Camera, pixel_directions, ray_sphere_interval, view_basis_inverses

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StepSchedule:
    step_start: float = 1e-2
    step_end: float = 5e-4
    total_batches: int = 5000

    def __call__(self, batch: int) -> float:
        a = min(max(batch / max(self.total_batches, 1), 0.0), 1.0)
        return float(math.exp((1 - a) * math.log(self.step_start) + a * math.log(self.step_end)))


class OccupancyGrid:
    """Binary occupancy over the cube [-bound, bound]^3.

    ``rule="band"`` marks a cell occupied when its centre lies inside the
    surface or within ln((1 - tau)/tau) / k of it.  ``rule="literal"``
    applies ``1 / (1 + exp(-k f)) < tau`` verbatim.  ``interior`` flags
    cells deeper than the band inside the surface; marching stops on
    entering one (occluded space).

    ``opacity_margin`` widens the band on both sides to that distance plus
    half a cell diagonal.  Training sets it to a few sigmoid widths 1/s so
    that every ray starts sampling where the sigmoid is still saturated
    and stops only after it has decayed; a narrower band truncates the
    opacity integral and biases the surface outward.
    """

    def __init__(self, resolution: int = 128, bound: float = 1.0, k: float = 80.0, tau: float = 0.1,
                 rule: str = "band"):
        if rule not in ("band", "literal"):
            raise ValueError(f"unknown occupancy rule {rule!r}")
        self.resolution = resolution
        self.bound = bound
        self.k = k
        self.tau = tau
        self.rule = rule
        self.opacity_margin = 0.0
        self.bits = np.ones((resolution,) * 3, dtype=np.bool_)
        self.interior = np.zeros((resolution,) * 3, dtype=np.bool_)

    @property
    def cell_size(self) -> float:
        return 2 * self.bound / self.resolution

    @property
    def band(self) -> float:
        return math.log((1 - self.tau) / self.tau) / self.k

    @property
    def effective_band(self) -> float:
        if self.opacity_margin <= 0:
            return self.band
        return max(self.band, self.opacity_margin + 0.5 * math.sqrt(3) * self.cell_size)

    def cell_centers(self) -> np.ndarray:
        c = -self.bound + (np.arange(self.resolution) + 0.5) * self.cell_size
        return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)

    def classify(self, f: np.ndarray):
        if self.rule == "literal":
            with np.errstate(over="ignore"):
                occ = 1.0 / (1.0 + np.exp(-self.k * f)) < self.tau
            return occ, np.zeros_like(occ)
        b = self.effective_band
        occ = (np.abs(f) < b) | (f < 0)
        return occ, f <= -b

    def seed_sphere(self, radius: float) -> None:
        f = np.linalg.norm(self.cell_centers(), axis=-1) - radius
        self.bits, self.interior = self.classify(f)

    def occupied_fraction(self) -> float:
        return float(self.bits.mean())

    def dump(self, path) -> None:
        """Debug dump: header line then run-length encoded bits in C order."""
        flat = self.bits.reshape(-1).astype(np.uint8)
        change = np.flatnonzero(np.diff(flat)) + 1
        starts = np.concatenate([[0], change])
        lengths = np.diff(np.concatenate([starts, [flat.size]]))
        with open(path, "w") as fh:
            fh.write(f"occgrid {self.resolution} {self.bound} first={int(flat[0])}\n")
            fh.write(" ".join(map(str, lengths.tolist())) + "\n")


def _eval_numpy(field, pts: np.ndarray, chunk: int = 1 << 17) -> np.ndarray:
    out = np.empty(pts.shape[0])
    with torch.no_grad():
        for i in range(0, pts.shape[0], chunk):
            x = torch.as_tensor(pts[i : i + chunk], dtype=field.dtype)
            out[i : i + chunk] = field.sdf(x).double().numpy()
    return out


def update_occupancy(grid: OccupancyGrid, field, hierarchical: bool = True, block: int = 4,
                     lipschitz: float = 2.0, counter=None) -> OccupancyGrid:
    """Re-evaluate every cell centre.

    With ``hierarchical`` the field is first evaluated at block centres;
    blocks whose value exceeds band + lipschitz * half-diagonal in
    magnitude are classified wholesale.  The exact per-cell pass is used
    otherwise or when the resolution is not divisible by ``block``.
    """
    R = grid.resolution
    centers = grid.cell_centers()
    if not hierarchical or R % block:
        f = _eval_numpy(field, centers.reshape(-1, 3)).reshape((R,) * 3)
        if counter is not None:
            counter.add("occupancy", f.size)
        grid.bits, grid.interior = grid.classify(f)
        return grid
    nb = R // block
    bsize = block * grid.cell_size
    bc = -grid.bound + (np.arange(nb) + 0.5) * bsize
    bcenters = np.stack(np.meshgrid(bc, bc, bc, indexing="ij"), axis=-1).reshape(-1, 3)
    fb = _eval_numpy(field, bcenters).reshape((nb,) * 3)
    margin = grid.effective_band + lipschitz * (math.sqrt(3) / 2) * bsize
    fine = np.abs(fb) <= margin
    f = np.repeat(np.repeat(np.repeat(fb, block, 0), block, 1), block, 2)
    cells = centers.reshape(nb, block, nb, block, nb, block, 3).transpose(0, 2, 4, 1, 3, 5, 6)
    sel = cells[fine].reshape(-1, 3)
    vals = _eval_numpy(field, sel).reshape(-1, block, block, block)
    fv = f.reshape(nb, block, nb, block, nb, block).transpose(0, 2, 4, 1, 3, 5).copy()
    fv[fine] = vals
    f = fv.transpose(0, 3, 1, 4, 2, 5).reshape((R,) * 3)
    if counter is not None:
        counter.add("occupancy", bcenters.shape[0] + sel.shape[0])
    grid.bits, grid.interior = grid.classify(f)
    return grid


@numba.njit(cache=True)
def _march(origins, dirs, t0s, t1s, h, offsets, bits, interior, lo, cs, res, stop_interior, max_samples,
           out_t, out_gap, counts):
    for r in range(origins.shape[0]):
        t0 = t0s[r]
        t1 = t1s[r]
        n = 0
        if not (t1 > t0):
            counts[r] = 0
            continue
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        off = offsets[r]
        k = 0
        last_k = -2
        while n < max_samples:
            t = t0 + (k + off) * h
            if t > t1:
                break
            px = ox + t * dx
            py = oy + t * dy
            pz = oz + t * dz
            ix = int(math.floor((px - lo) / cs))
            iy = int(math.floor((py - lo) / cs))
            iz = int(math.floor((pz - lo) / cs))
            ix = min(max(ix, 0), res - 1)
            iy = min(max(iy, 0), res - 1)
            iz = min(max(iz, 0), res - 1)
            if stop_interior and interior[ix, iy, iz]:
                break
            if bits[ix, iy, iz]:
                out_t[r, n] = t
                out_gap[r, n] = k != last_k + 1
                last_k = k
                n += 1
                k += 1
                continue
            # jump to the exit of this empty cell
            t_exit = 1e30
            for a in range(3):
                d = dx if a == 0 else (dy if a == 1 else dz)
                p = px if a == 0 else (py if a == 1 else pz)
                i = ix if a == 0 else (iy if a == 1 else iz)
                if d > 1e-12:
                    te = t + (lo + (i + 1) * cs - p) / d
                elif d < -1e-12:
                    te = t + (lo + i * cs - p) / d
                else:
                    continue
                if te < t_exit:
                    t_exit = te
            k_next = int(math.ceil((t_exit - t0) / h - off))
            k = k_next if k_next > k else k + 1
        counts[r] = n


def march_rays(origins, dirs, grid: OccupancyGrid, step: float, bound_radius: float = 1.0,
               offsets=None, stop_interior: bool = True, max_samples: int = 4096):
    """March many rays; returns (t values (R, M), gap flags (R, M), counts (R,))."""
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    R = origins.shape[0]
    t0, t1 = ray_sphere_interval(origins, dirs, bound_radius)
    t0 = np.where(np.isnan(t0), 0.0, np.maximum(t0, 0.0))
    t1 = np.where(np.isnan(t1), -1.0, t1)
    longest = float(np.max(t1 - t0, initial=0.0))
    cap = int(min(max_samples, math.ceil(max(longest, 0.0) / step) + 2))
    offsets = np.zeros(R) if offsets is None else np.asarray(offsets, dtype=np.float64)
    out_t = np.zeros((R, max(cap, 1)))
    out_gap = np.zeros((R, max(cap, 1)), dtype=np.bool_)
    counts = np.zeros(R, dtype=np.int64)
    _march(origins, dirs, t0, t1, float(step), offsets, grid.bits, grid.interior, -grid.bound,
           grid.cell_size, grid.resolution, stop_interior, cap, out_t, out_gap, counts)
    return out_t, out_gap, counts


def march_center_ray(ray, grid: OccupancyGrid, step: float, bound_radius: float = 1.0, offset: float = 0.0,
                     stop_interior: bool = True) -> np.ndarray:
    t, _, n = march_rays(ray.origin[None], ray.direction[None], grid, step, bound_radius, [offset], stop_interior)
    return t[0, : n[0]].copy()


def plane_extend(t_center, center_dir, patch_dirs, m):
    """Distances along each patch ray to the marching plane through the centre sample."""
    t_center = np.asarray(t_center, dtype=np.float64)
    cos_j = np.einsum("...a,a->...", np.asarray(patch_dirs, dtype=np.float64), np.asarray(m, dtype=np.float64))
    if np.any(cos_j <= 1e-8):
        raise RuntimeError("patch ray does not point forward through the image plane")
    ratio = float(np.dot(center_dir, m)) / cos_j
    return t_center[..., None, None] * ratio


@dataclass
class NormalView:
    camera: Camera
    normals: np.ndarray  # (H, W, 3) world-space unit normals
    mask: np.ndarray  # (H, W) in [0, 1]


@dataclass
class PatchSampleSet:
    positions: np.ndarray  # (S, ph, pw, 3)
    t_grid: np.ndarray  # (S, ph, pw)
    patch_index: np.ndarray  # (S,)
    patch_offsets: np.ndarray  # (P + 1,)
    gap_before: np.ndarray  # (S,) first sample of a run on its ray
    step: np.ndarray  # (S,)
    V_inv: np.ndarray  # (P, ph, pw, 3, 3)
    axes: np.ndarray  # (P, 3, 3) camera x, y, z in world
    directions: np.ndarray  # (P, ph, pw, 3)
    origins: np.ndarray  # (P, 3)
    bound: float = 1.0

    @property
    def n_patches(self) -> int:
        return self.V_inv.shape[0]

    @property
    def n_samples(self) -> int:
        return self.positions.shape[0]

    @property
    def t_center(self) -> np.ndarray:
        ph, pw = self.t_grid.shape[1:]
        return self.t_grid[:, ph // 2, pw // 2]


@dataclass
class PatchLabels:
    view: np.ndarray  # (P,)
    row: np.ndarray  # (P,) top-left pixel row
    col: np.ndarray  # (P,)
    normals: np.ndarray  # (P, ph, pw, 3)
    mask: np.ndarray  # (P, ph, pw)


class ViewSampler:
    """Per-view caches (directions, V^-1) and the patch-centre pool."""

    def __init__(self, views: list[NormalView], patch: int = 3, pool: str = "all"):
        """``pool="foreground"`` draws only patches whose centre pixel is
        foreground; ``"touching"`` draws every patch containing at least one
        foreground pixel; ``"all"`` draws every patch that fits in the image,
        so every pixel is supervised equally often."""
        if not views:
            raise ValueError("no views to sample from")
        if pool not in ("all", "touching", "foreground"):
            raise ValueError(f"unknown centre pool {pool!r}")
        self.views = views
        self.patch = patch
        self.pool = pool
        self.dirs = []
        self.V_inv = []
        pools = []
        half = patch // 2
        for i, v in enumerate(views):
            cam = v.camera
            vv, uu = np.mgrid[0 : cam.height, 0 : cam.width]
            self.dirs.append(pixel_directions(cam, uu, vv))
            self.V_inv.append(view_basis_inverses(cam))
            fg = np.asarray(v.mask) > 0.5
            if not fg.any():
                log.warning("view %d has no usable foreground; excluded from sampling", i)
                continue
            if pool == "touching":
                fg = maximum_filter(fg, size=patch, mode="constant")
            elif pool == "all":
                fg = np.ones_like(fg)
            inner = np.zeros_like(fg)
            inner[half : cam.height - (patch - 1 - half), half : cam.width - (patch - 1 - half)] = True
            rows, cols = np.nonzero(fg & inner)
            if rows.size == 0:
                log.warning("view %d has no usable foreground; excluded from sampling", i)
                continue
            pools.append(np.stack([np.full(rows.size, i), rows, cols], axis=1))
        if not pools:
            raise ValueError("no view has foreground pixels")
        self.centers = np.concatenate(pools)

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.centers[rng.integers(0, self.centers.shape[0], size=n)]

    def build(self, centers: np.ndarray, grid: OccupancyGrid, step: float, bound: float = 1.0,
              offsets=None, margin: float = 0.0, with_labels: bool = True):
        """Plane-march the patches centred at ``centers`` ((P, 3): view, row, col)."""
        ph = pw = self.patch
        half = self.patch // 2
        P = centers.shape[0]
        dirs = np.empty((P, ph, pw, 3))
        V_inv = np.empty((P, ph, pw, 3, 3))
        axes = np.empty((P, 3, 3))
        origins = np.empty((P, 3))
        normals = np.zeros((P, ph, pw, 3))
        mask = np.zeros((P, ph, pw))
        for vi in np.unique(centers[:, 0]):
            sel = np.flatnonzero(centers[:, 0] == vi)
            view = self.views[vi]
            r0 = centers[sel, 1] - half
            c0 = centers[sel, 2] - half
            rr = r0[:, None, None] + np.arange(ph)[None, :, None]
            cc = c0[:, None, None] + np.arange(pw)[None, None, :]
            dirs[sel] = self.dirs[vi][rr, cc]
            V_inv[sel] = self.V_inv[vi][rr, cc]
            axes[sel] = view.camera.axes
            origins[sel] = view.camera.center
            if with_labels:
                normals[sel] = view.normals[rr, cc]
                mask[sel] = view.mask[rr, cc]
        cdir = dirs[:, half, half]
        t, gap, counts = march_rays(origins, cdir, grid, step, bound, offsets)
        m = axes[:, 2]
        cos_c = np.einsum("pa,pa->p", cdir, m)
        cos_j = np.einsum("pija,pa->pij", dirs, m)
        if np.any(cos_j <= 1e-8):
            raise RuntimeError("patch ray does not point forward through the image plane")
        ratio = cos_c[:, None, None] / cos_j

        pid = np.repeat(np.arange(P), counts)
        keep_t = t[np.arange(t.shape[1])[None, :] < counts[:, None]]
        keep_gap = gap[np.arange(t.shape[1])[None, :] < counts[:, None]]
        t_grid = keep_t[:, None, None] * ratio[pid]
        pos = origins[pid][:, None, None, :] + t_grid[..., None] * dirs[pid]
        inside = np.all(np.abs(pos) <= bound - margin, axis=(1, 2, 3))
        if not inside.all():
            # a dropped sample breaks lattice adjacency for its successor
            nxt = np.flatnonzero(~inside) + 1
            nxt = nxt[nxt < inside.size]
            keep_gap = keep_gap.copy()
            keep_gap[nxt] = True
        pid, t_grid, pos, keep_gap = pid[inside], t_grid[inside], pos[inside], keep_gap[inside]
        first = np.ones(pid.size, dtype=bool)
        first[1:] = pid[1:] != pid[:-1]
        counts = np.bincount(pid, minlength=P)
        samples = PatchSampleSet(
            positions=pos, t_grid=t_grid, patch_index=pid,
            patch_offsets=np.concatenate([[0], np.cumsum(counts)]),
            gap_before=keep_gap | first, step=np.full(pid.size, step),
            V_inv=V_inv, axes=axes, directions=dirs, origins=origins, bound=bound,
        )
        labels = PatchLabels(centers[:, 0], centers[:, 1] - half, centers[:, 2] - half, normals, mask)
        return samples, labels


def sample_batch(sampler: ViewSampler, grid: OccupancyGrid, schedule: StepSchedule, batch_index: int,
                 n_patches: int, rng: np.random.Generator, jitter: bool = True, bound: float = 1.0,
                 margin: float = 0.0):
    centers = sampler.draw(n_patches, rng)
    offsets = rng.random(n_patches) if jitter else None
    return sampler.build(centers, grid, schedule(batch_index), bound, offsets, margin)
