"""Synthetic turntable scenes of analytic shapes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import AnalyticSdf
from .geometry import Camera, look_at, pixel_directions
from .mesh_eval import TriMesh, marching_cubes, sphere_trace_numpy
from .sampling import NormalView

BOUND_MARGIN = 0.1
SHAPES = ("sphere", "torus", "union")


def make_shape(name: str) -> AnalyticSdf:
    if name == "sphere":
        return AnalyticSdf.sphere(0.5)
    if name == "torus":
        return AnalyticSdf.torus(0.35, 0.12)
    if name == "union":
        return AnalyticSdf.union()
    raise ValueError(f"unknown shape {name!r}; choose from {SHAPES}")


@dataclass
class SynthSpec:
    shape: AnalyticSdf = dc_field(default_factory=lambda: make_shape("sphere"))
    n_views: int = 20
    height: int = 128
    width: int = 128
    orbit_radius: float = 3.0
    elevation_deg: float = 20.0
    second_ring_deg: float | None = None  # extra ring at this elevation
    focal: float = 320.0
    noise_deg: float = 0.0
    seed: int = 0
    bound: float = 1.0
    gt_mesh_resolution: int = 256

    def __post_init__(self):
        if self.n_views < 2:
            raise ValueError("need at least two views")
        if self.noise_deg < 0:
            raise ValueError("noise must be non-negative")
        if self.shape.extent() > self.bound - BOUND_MARGIN:
            raise ValueError(f"shape extent {self.shape.extent():.3f} exceeds bound {self.bound} minus margin")
        if self.orbit_radius <= self.bound:
            raise ValueError("cameras must lie outside the scene bound")


def turntable_cameras(spec: SynthSpec) -> list[Camera]:
    rings = [spec.elevation_deg] if spec.second_ring_deg is None else [spec.elevation_deg, spec.second_ring_deg]
    per_ring = [spec.n_views // len(rings) + (1 if i < spec.n_views % len(rings) else 0) for i in range(len(rings))]
    cams = []
    for elev, count in zip(rings, per_ring):
        e = math.radians(elev)
        for k in range(count):
            az = 2 * math.pi * k / count
            eye = spec.orbit_radius * np.array([math.cos(e) * math.cos(az), math.cos(e) * math.sin(az), math.sin(e)])
            cams.append(Camera(spec.focal, spec.focal, spec.width / 2, spec.height / 2, look_at(eye), eye,
                               spec.width, spec.height))
    return cams


def render_view(shape: AnalyticSdf, cam: Camera, bound: float = 1.0) -> NormalView:
    """Ground-truth world normals and mask by sphere tracing each pixel centre."""
    vv, uu = np.mgrid[0 : cam.height, 0 : cam.width]
    d = pixel_directions(cam, uu, vv).reshape(-1, 3)
    t = sphere_trace_numpy(shape.numpy_sdf, cam.center, d, bound, tol=1e-5, max_steps=512)
    hit = np.isfinite(t)
    normals = np.zeros((d.shape[0], 3))
    if hit.any():
        g = shape.numpy_grad(cam.center + t[hit, None] * d[hit])
        normals[hit] = g / np.linalg.norm(g, axis=1, keepdims=True)
    return NormalView(cam, normals.reshape(cam.height, cam.width, 3), hit.reshape(cam.height, cam.width).astype(float))


def add_noise(views: list[NormalView], sigma_deg: float, seed: int = 0) -> list[NormalView]:
    """Rotate each foreground normal by |N(0, sigma)| degrees about a random
    axis perpendicular to it.  Each view draws from its own stream."""
    if sigma_deg < 0:
        raise ValueError("noise must be non-negative")
    if sigma_deg == 0:
        return [NormalView(v.camera, v.normals.copy(), v.mask.copy()) for v in views]
    out = []
    for k, v in enumerate(views):
        rng = np.random.default_rng([seed, k])
        n = v.normals.reshape(-1, 3).copy()
        fg = np.flatnonzero(v.mask.reshape(-1) > 0.5)
        out_n = n.copy()
        out_n[fg] = perturb_normals(n[fg], sigma_deg, rng)
        out.append(NormalView(v.camera, out_n.reshape(v.normals.shape), v.mask.copy()))
    return out


def perturb_normals(n: np.ndarray, sigma_deg: float, rng: np.random.Generator) -> np.ndarray:
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    helper = np.where(np.abs(n[:, :1]) < 0.9, np.array([[1.0, 0, 0]]), np.array([[0, 1.0, 0]]))
    e1 = np.cross(n, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(n, e1)
    phi = rng.uniform(0, 2 * np.pi, len(n))
    axis = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
    theta = np.radians(np.abs(rng.normal(0.0, sigma_deg, len(n))))
    # Rodrigues with axis perpendicular to n: n cos + (axis x n) sin
    r = n * np.cos(theta)[:, None] + np.cross(axis, n) * np.sin(theta)[:, None]
    return r / np.linalg.norm(r, axis=1, keepdims=True)


@dataclass
class SynthScene:
    views: list
    gt_mesh: TriMesh
    spec: SynthSpec


def synth_views(spec: SynthSpec, with_mesh: bool = True) -> SynthScene:
    views = [render_view(spec.shape, cam, spec.bound) for cam in turntable_cameras(spec)]
    views = add_noise(views, spec.noise_deg, spec.seed)
    mesh = marching_cubes(spec.shape, spec.gt_mesh_resolution, spec.bound) if with_mesh else None
    return SynthScene(views, mesh, spec)
