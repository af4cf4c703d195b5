"""Mesh extraction, ray casting, and reconstruction metrics."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path

import numba
import numpy as np
import torch
from scipy.spatial import cKDTree
from skimage import measure

from .geometry import Camera, pixel_directions, ray_sphere_interval

log = logging.getLogger(__name__)

MIN_TRIANGLE_AREA = 1e-12
HIT_BIAS = 1e-6


@dataclass
class TriMesh:
    vertices: np.ndarray  # (N, 3) float64
    triangles: np.ndarray  # (M, 3) int64
    normals: np.ndarray | None = None  # optional per-vertex

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def is_empty(self) -> bool:
        return self.triangles.shape[0] == 0

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def cleaned(self, min_area: float = MIN_TRIANGLE_AREA) -> "TriMesh":
        """Drop triangles below ``min_area`` and unreferenced vertices."""
        tris = self.triangles[self.triangle_areas() >= min_area]
        used, inverse = np.unique(tris.ravel(), return_inverse=True)
        normals = self.normals[used] if self.normals is not None else None
        return TriMesh(self.vertices[used], inverse.reshape(-1, 3), normals)

    def write_obj(self, path) -> None:
        with open(path, "w") as fh:
            for v in self.vertices:
                fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
            for t in self.triangles + 1:
                fh.write(f"f {t[0]} {t[1]} {t[2]}\n")

    @classmethod
    def read(cls, path) -> "TriMesh":
        path = Path(path)
        if path.suffix.lower() == ".ply":
            return read_ply(path)
        return read_obj(path)


def read_obj(path) -> TriMesh:
    verts, tris = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                    tris.append([idx[0], idx[k], idx[k + 1]])
    return TriMesh(np.array(verts).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3))


_PLY_TYPES = {"char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1", "short": "i2", "int16": "i2",
              "ushort": "u2", "uint16": "u2", "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
              "float": "f4", "float32": "f4", "double": "f8", "float64": "f8"}


def read_ply(path) -> TriMesh:
    """Binary little-endian PLY with a vertex element (x, y, z first) and a
    face element holding one list property."""
    data = Path(path).read_bytes()
    end = data.index(b"end_header") + len(b"end_header")
    end = data.index(b"\n", end) + 1
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise ValueError("only binary little-endian PLY is supported")
    elements = []
    for line in header:
        p = line.split()
        if p[:1] == ["element"]:
            elements.append((p[1], int(p[2]), []))
        elif p[:1] == ["property"]:
            elements[-1][2].append(p[1:])
    off = end
    verts = tris = None
    for name, count, props in elements:
        if name == "vertex":
            dt = np.dtype([(pr[-1], "<" + _PLY_TYPES[pr[0]]) for pr in props])
            arr = np.frombuffer(data, dt, count, off)
            off += dt.itemsize * count
            verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
        elif name == "face":
            (_, cnt_t, idx_t, _), = [pr for pr in props if pr[0] == "list"]
            ct, it = np.dtype("<" + _PLY_TYPES[cnt_t]), np.dtype("<" + _PLY_TYPES[idx_t])
            out = []
            for _ in range(count):
                n = int(np.frombuffer(data, ct, 1, off)[0])
                off += ct.itemsize
                idx = np.frombuffer(data, it, n, off).astype(np.int64)
                off += it.itemsize * n
                out.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, n - 1))
            tris = np.array(out, dtype=np.int64).reshape(-1, 3)
        else:
            raise ValueError(f"unsupported PLY element {name!r}")
    if verts is None:
        raise ValueError("PLY has no vertex element")
    return TriMesh(verts, tris if tris is not None else np.zeros((0, 3), dtype=np.int64))


def write_ply(mesh: TriMesh, path) -> None:
    head = (f"ply\nformat binary_little_endian 1.0\nelement vertex {len(mesh.vertices)}\n"
            "property float x\nproperty float y\nproperty float z\n"
            f"element face {len(mesh.triangles)}\nproperty list uchar int vertex_indices\nend_header\n")
    with open(path, "wb") as fh:
        fh.write(head.encode("ascii"))
        fh.write(mesh.vertices.astype("<f4").tobytes())
        for t in mesh.triangles:
            fh.write(struct.pack("<B3i", 3, *t))


# ----------------------------------------------------------------------------- marching cubes


def _eval_grid(sdf_fn, pts: np.ndarray, chunk: int = 1 << 18) -> np.ndarray:
    out = np.empty(len(pts))
    for i in range(0, len(pts), chunk):
        out[i : i + chunk] = sdf_fn(pts[i : i + chunk])
    return out


def as_numpy_sdf(field):
    """Wrap a field (torch module or analytic SDF) as numpy -> numpy."""
    if hasattr(field, "numpy_sdf"):
        return field.numpy_sdf

    def fn(x):
        with torch.no_grad():
            return field.sdf(torch.as_tensor(x, dtype=field.dtype)).double().numpy()

    return fn


def marching_cubes(field, resolution: int = 256, bound: float = 1.0, iso: float = 0.0, hierarchical: bool = False,
                   block: int = 4, lipschitz: float = 2.0) -> TriMesh:
    """Zero level set on a ``resolution``^3-cell lattice over [-bound, bound]^3.

    With ``hierarchical`` the field is first evaluated at block centres and
    blocks whose value exceeds ``lipschitz`` times the block half-diagonal
    are filled with that value instead of being evaluated densely.
    """
    if resolution < 8:
        raise ValueError("marching-cubes resolution must be at least 8")
    sdf_fn = as_numpy_sdf(field)
    n = resolution + 1
    h = 2 * bound / resolution
    axis = -bound + h * np.arange(n)
    if hierarchical and resolution % block == 0:
        vol = _hierarchical_volume(sdf_fn, axis, block, lipschitz, iso)
    else:
        g = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), -1).reshape(-1, 3)
        vol = _eval_grid(sdf_fn, g).reshape(n, n, n)
    if not (vol.min() < iso < vol.max()):
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = measure.marching_cubes(vol, level=iso, spacing=(h, h, h), gradient_direction="ascent")
    # "ascent" winds faces inward for a field negative inside; flip to outward
    mesh = TriMesh(verts.astype(np.float64) - bound, faces[:, ::-1].astype(np.int64))
    return mesh.cleaned()


def _hierarchical_volume(sdf_fn, axis, block, lipschitz, iso):
    n = axis.size
    nb = (n - 1) // block
    h = axis[1] - axis[0]
    centers_1d = axis[0] + (np.arange(nb) + 0.5) * block * h
    c = np.stack(np.meshgrid(centers_1d, centers_1d, centers_1d, indexing="ij"), -1).reshape(-1, 3)
    fc = _eval_grid(sdf_fn, c).reshape(nb, nb, nb)
    half_diag = 0.5 * math.sqrt(3) * block * h
    near = np.abs(fc - iso) <= lipschitz * half_diag
    # a lattice point takes the coarse value unless any adjacent block is near
    idx = np.minimum(np.arange(n) // block, nb - 1)
    vol = fc[np.ix_(idx, idx, idx)].copy()
    need = np.zeros((n, n, n), dtype=bool)
    for bi, bj, bk in np.argwhere(near):
        need[bi * block : bi * block + block + 1, bj * block : bj * block + block + 1,
             bk * block : bk * block + block + 1] = True
    pts_idx = np.argwhere(need)
    if len(pts_idx):
        vol[need] = _eval_grid(sdf_fn, axis[pts_idx])
    return vol


# ----------------------------------------------------------------------------- BVH ray casting


@numba.njit(cache=True)
def _build_bvh(lo, hi, cent, leaf_size):
    m = cent.shape[0]
    order = np.arange(m)
    cap = 2 * m + 1
    nmin = np.empty((cap, 3))
    nmax = np.empty((cap, 3))
    left = -np.ones(cap, dtype=np.int64)
    start = np.zeros(cap, dtype=np.int64)
    count = np.zeros(cap, dtype=np.int64)
    stack = np.empty((cap, 3), dtype=np.int64)  # node, begin, end
    n_nodes = 1
    sp = 0
    stack[0, 0], stack[0, 1], stack[0, 2] = 0, 0, m
    sp = 1
    while sp > 0:
        sp -= 1
        node, b, e = stack[sp, 0], stack[sp, 1], stack[sp, 2]
        for a in range(3):
            mn, mx = np.inf, -np.inf
            for i in range(b, e):
                t = order[i]
                mn = min(mn, lo[t, a])
                mx = max(mx, hi[t, a])
            nmin[node, a], nmax[node, a] = mn, mx
        if e - b <= leaf_size:
            start[node], count[node] = b, e - b
            continue
        # split at the centroid median of the widest axis
        best, extent = 0, -1.0
        for a in range(3):
            mn, mx = np.inf, -np.inf
            for i in range(b, e):
                v = cent[order[i], a]
                mn, mx = min(mn, v), max(mx, v)
            if mx - mn > extent:
                best, extent = a, mx - mn
        keys = np.empty(e - b)
        for i in range(b, e):
            keys[i - b] = cent[order[i], best]
        perm = np.argsort(keys, kind="mergesort")
        seg = order[b:e].copy()
        for i in range(e - b):
            order[b + i] = seg[perm[i]]
        mid = (b + e) // 2
        l_node = n_nodes
        n_nodes += 2
        left[node] = l_node
        stack[sp, 0], stack[sp, 1], stack[sp, 2] = l_node, b, mid
        sp += 1
        stack[sp, 0], stack[sp, 1], stack[sp, 2] = l_node + 1, mid, e
        sp += 1
    return nmin[:n_nodes], nmax[:n_nodes], left[:n_nodes], start[:n_nodes], count[:n_nodes], order


@numba.njit(cache=True, inline="always")
def _max_dim(d):
    ax = np.abs(d)
    if ax[0] >= ax[1] and ax[0] >= ax[2]:
        return 0
    if ax[1] >= ax[2]:
        return 1
    return 2


@numba.njit(cache=True)
def _ray_triangle(o, d, kz, kx, ky, sx, sy, sz, a, b, c):
    """Watertight ray/triangle test; returns t or inf."""
    ax, ay, az = a[kx] - o[kx], a[ky] - o[ky], a[kz] - o[kz]
    bx, by, bz = b[kx] - o[kx], b[ky] - o[ky], b[kz] - o[kz]
    cx, cy, cz = c[kx] - o[kx], c[ky] - o[ky], c[kz] - o[kz]
    ax, ay = ax - sx * az, ay - sy * az
    bx, by = bx - sx * bz, by - sy * bz
    cx, cy = cx - sx * cz, cy - sy * cz
    u = cx * by - cy * bx
    v = ax * cy - ay * cx
    w = bx * ay - by * ax
    if (u < 0 or v < 0 or w < 0) and (u > 0 or v > 0 or w > 0):
        return np.inf
    det = u + v + w
    if det == 0.0:
        return np.inf
    t = (u * sz * az + v * sz * bz + w * sz * cz) / det
    if t <= HIT_BIAS:
        return np.inf
    return t


@numba.njit(cache=True)
def _slab(o, inv, bmin, bmax, t_best):
    t0, t1 = 0.0, t_best
    for a in range(3):
        ta = (bmin[a] - o[a]) * inv[a]
        tb = (bmax[a] - o[a]) * inv[a]
        if ta > tb:
            ta, tb = tb, ta
        if ta != ta:  # 0 * inf
            ta = -np.inf
        if tb != tb:
            tb = np.inf
        t0 = max(t0, ta)
        t1 = min(t1, tb)
        if t0 > t1:
            return False
    return True


@numba.njit(cache=True)
def _cast(origins, dirs, verts, tris, nmin, nmax, left, start, count, order):
    n = origins.shape[0]
    t_hit = np.full(n, np.inf)
    tri_hit = -np.ones(n, dtype=np.int64)
    stack = np.empty(128, dtype=np.int64)
    for r in range(n):
        o, d = origins[r], dirs[r]
        kz = _max_dim(d)
        kx = (kz + 1) % 3
        ky = (kx + 1) % 3
        if d[kz] < 0:
            kx, ky = ky, kx
        sx, sy, sz = d[kx] / d[kz], d[ky] / d[kz], 1.0 / d[kz]
        inv = 1.0 / d
        best = np.inf
        hit = -1
        sp = 1
        stack[0] = 0
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if not _slab(o, inv, nmin[node], nmax[node], best):
                continue
            if left[node] < 0:
                for i in range(start[node], start[node] + count[node]):
                    ti = order[i]
                    t = _ray_triangle(o, d, kz, kx, ky, sx, sy, sz, verts[tris[ti, 0]], verts[tris[ti, 1]],
                                      verts[tris[ti, 2]])
                    if t < best:
                        best, hit = t, ti
            else:
                stack[sp] = left[node]
                stack[sp + 1] = left[node] + 1
                sp += 2
        t_hit[r], tri_hit[r] = best, hit
    return t_hit, tri_hit


@numba.njit(cache=True)
def _cast_brute(origins, dirs, verts, tris):
    n = origins.shape[0]
    t_hit = np.full(n, np.inf)
    tri_hit = -np.ones(n, dtype=np.int64)
    for r in range(n):
        o, d = origins[r], dirs[r]
        kz = _max_dim(d)
        kx = (kz + 1) % 3
        ky = (kx + 1) % 3
        if d[kz] < 0:
            kx, ky = ky, kx
        sx, sy, sz = d[kx] / d[kz], d[ky] / d[kz], 1.0 / d[kz]
        for ti in range(tris.shape[0]):
            t = _ray_triangle(o, d, kz, kx, ky, sx, sy, sz, verts[tris[ti, 0]], verts[tris[ti, 1]],
                              verts[tris[ti, 2]])
            if t < t_hit[r]:
                t_hit[r], tri_hit[r] = t, ti
    return t_hit, tri_hit


class RayCaster:
    """First-hit ray casting against a triangle mesh through a BVH."""

    def __init__(self, mesh: TriMesh, leaf_size: int = 4):
        if mesh.is_empty:
            raise ValueError("cannot ray-cast an empty mesh")
        self.mesh = mesh
        tri = mesh.vertices[mesh.triangles]
        self._bvh = _build_bvh(tri.min(1), tri.max(1), tri.mean(1), leaf_size)

    def cast(self, origins, dirs):
        """Returns (t, triangle index); misses give (inf, -1)."""
        o = np.ascontiguousarray(np.broadcast_to(origins, np.shape(dirs)), dtype=np.float64).reshape(-1, 3)
        d = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
        return _cast(o, d, self.mesh.vertices, self.mesh.triangles, *self._bvh)

    def cast_brute(self, origins, dirs):
        o = np.ascontiguousarray(np.broadcast_to(origins, np.shape(dirs)), dtype=np.float64).reshape(-1, 3)
        d = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
        return _cast_brute(o, d, self.mesh.vertices, self.mesh.triangles)


@dataclass
class VisiblePoints:
    points: np.ndarray  # (K, 3)
    view: np.ndarray  # (K,)
    pixel: np.ndarray  # (K, 2) row, col
    misses: int  # foreground pixels whose ray missed the surface


def _foreground_rays(cam: Camera, mask):
    rows, cols = np.nonzero(np.asarray(mask) > 0.5)
    d = pixel_directions(cam, cols, rows)
    return rows, cols, d


def visible_points(mesh: TriMesh, views) -> VisiblePoints:
    """First mesh intersection of every foreground pixel ray of every view."""
    caster = RayCaster(mesh)
    pts, vid, pix, misses = [], [], [], 0
    for k, view in enumerate(views):
        rows, cols, d = _foreground_rays(view.camera, view.mask)
        t, _ = caster.cast(view.camera.center, d)
        ok = np.isfinite(t)
        misses += int((~ok).sum())
        pts.append(view.camera.center + t[ok, None] * d[ok])
        vid.append(np.full(int(ok.sum()), k))
        pix.append(np.stack([rows[ok], cols[ok]], 1))
    return VisiblePoints(np.concatenate(pts).reshape(-1, 3), np.concatenate(vid), np.concatenate(pix).reshape(-1, 2),
                         misses)


@numba.njit(cache=True)
def _trace_numpy_like(t, active, t_end, vals, tol):
    for i in range(t.size):
        if not active[i]:
            continue
        if abs(vals[i]) < tol:
            active[i] = False
        else:
            t[i] += vals[i]
            if t[i] > t_end[i]:
                active[i] = False
                t[i] = np.inf


def sphere_trace_numpy(sdf_fn, origins, dirs, bound: float = 1.0, tol: float = 1e-5, max_steps: int = 512):
    """Sphere tracing of a numpy SDF; returns t (inf on miss)."""
    o = np.ascontiguousarray(np.broadcast_to(origins, np.shape(dirs)), dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    t0, t1 = ray_sphere_interval(o, d, bound)
    hit = ~np.isnan(t0)
    t = np.where(hit, np.maximum(t0, 0.0), np.inf)
    t_end = np.where(hit, t1, -np.inf)
    active = hit.copy()
    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        vals = np.full(t.size, 0.0)
        vals[idx] = sdf_fn(o[idx] + t[idx, None] * d[idx])
        _trace_numpy_like(t, active, t_end, vals, tol)
    t[active] = np.inf
    return t


def analytic_visible_points(shape, views, bound: float = 1.0) -> VisiblePoints:
    """Visible points of an analytic SDF by sphere tracing to 1e-5."""
    pts, vid, pix, misses = [], [], [], 0
    for k, view in enumerate(views):
        rows, cols, d = _foreground_rays(view.camera, view.mask)
        t = sphere_trace_numpy(shape.numpy_sdf, view.camera.center, d, bound)
        ok = np.isfinite(t)
        misses += int((~ok).sum())
        pts.append(view.camera.center + t[ok, None] * d[ok])
        vid.append(np.full(int(ok.sum()), k))
        pix.append(np.stack([rows[ok], cols[ok]], 1))
    return VisiblePoints(np.concatenate(pts).reshape(-1, 3), np.concatenate(vid), np.concatenate(pix).reshape(-1, 2),
                         misses)


# ----------------------------------------------------------------------------- metrics


def _check_points(*sets):
    out = []
    for s in sets:
        s = np.asarray(s, dtype=np.float64).reshape(-1, 3)
        if s.shape[0] == 0:
            raise ValueError("point set is empty")
        out.append(s)
    return out


def nearest_distances(a, b) -> np.ndarray:
    """Distance from each point of ``a`` to its nearest neighbour in ``b``.

    The KD-tree only selects the neighbour; the distance is recomputed
    from coordinates so the result is bit-identical to brute force.
    """
    a, b = _check_points(a, b)
    _, idx = cKDTree(b).query(a, k=1)
    return np.sqrt(((a - b[idx]) ** 2).sum(1))


def nearest_distances_brute(a, b) -> np.ndarray:
    a, b = _check_points(a, b)
    out = np.empty(len(a))
    for i, p in enumerate(a):
        out[i] = np.sqrt(((p - b) ** 2).sum(1)).min()
    return out


def chamfer_l2(a, b, squared: bool = False) -> float:
    """Symmetric mean nearest-neighbour distance (halved sum of both
    directions); ``squared`` averages squared distances instead."""
    d_ab, d_ba = nearest_distances(a, b), nearest_distances(b, a)
    if squared:
        d_ab, d_ba = d_ab**2, d_ba**2
    return 0.5 * float(d_ab.mean()) + 0.5 * float(d_ba.mean())


def f_score(recon, gt, tau: float):
    """(precision, recall, F) with strict ``d < tau`` and F = 2PR/(P+R)."""
    p = float((nearest_distances(recon, gt) < tau).mean())
    r = float((nearest_distances(gt, recon) < tau).mean())
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


@dataclass
class AngularError:
    mean_deg: float
    zero_length: int
    per_pixel: np.ndarray = dc_field(repr=False)


def mean_angular_error(pred, gt, mask) -> AngularError:
    """Mean angle over the mask after normalising both maps; zero-length
    predictions count as 90 degrees and are reported."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("normal maps differ in shape")
    m = np.asarray(mask) > 0.5
    lp = np.linalg.norm(pred, axis=-1)
    lg = np.linalg.norm(gt, axis=-1)
    zero = (lp < 1e-12) & m
    cos = (pred * gt).sum(-1) / np.maximum(lp * lg, 1e-300)
    ang = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    ang = np.where(zero, 90.0, ang)
    if zero.any():
        log.warning("%d foreground pixels have zero-length predicted normals", int(zero.sum()))
    mean = float(ang[m].mean()) if m.any() else 0.0
    return AngularError(mean, int(zero.sum()), np.where(m, ang, np.nan))


@dataclass
class MetricReport:
    chamfer_l2: float
    f_score: float
    precision: float
    recall: float
    tau: float
    squared: bool = False
    n_recon: int = 0
    n_gt: int = 0
    recon_misses: int = 0
    gt_misses: int = 0
    mean_angular_error: float | None = None
    config: dict = dc_field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))


def evaluate_scene(recon: TriMesh, gt, views, tau: float = 5e-3, squared: bool = False, bound: float = 1.0,
                   unit_scale: float | None = None) -> MetricReport:
    """Visible-point Chamfer and F-score of ``recon`` against ``gt``.

    ``gt`` is a TriMesh or an analytic SDF; both surfaces are sampled by
    the first hits of the foreground pixel rays of ``views``.
    """
    if recon.is_empty:
        raise ValueError("reconstructed mesh is empty")
    vr = visible_points(recon, views)
    vg = visible_points(gt, views) if isinstance(gt, TriMesh) else analytic_visible_points(gt, views, bound)
    if len(vr.points) == 0 or len(vg.points) == 0:
        raise ValueError("no visible points on one of the surfaces")
    cd = chamfer_l2(vr.points, vg.points, squared)
    p, r, f = f_score(vr.points, vg.points, tau)
    cfg = {"tau": tau, "squared": squared, "n_views": len(views), "gt": "mesh" if isinstance(gt, TriMesh) else
           "analytic"}
    if unit_scale is not None:
        cfg["scene_mm"] = unit_scale
    return MetricReport(cd, f, p, r, tau, squared, len(vr.points), len(vg.points), vr.misses, vg.misses, None, cfg)
