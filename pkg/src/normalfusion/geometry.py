"""Pinhole cameras, rays and the per-pixel direction basis used by DFD.

Camera frame convention is x right, y down, z forward.  A pixel (u, v)
with sub-pixel offset (su, sv) back-projects through ((u + su - cx) / fx,
(v + sv - cy) / fy, 1); pixel centres use sub = (0.5, 0.5).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PIXEL_CENTER = (0.5, 0.5)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray


@dataclass(frozen=True)
class DirectionBasis:
    """Rows of ``V`` are cam-x, cam-y and the viewing direction (in world)."""

    V: np.ndarray
    V_inv: np.ndarray
    m: np.ndarray


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # world-from-camera
    translation: np.ndarray  # camera centre in world
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if orthonormality_error(R) > 1e-6 or np.linalg.det(R) < 0:
            raise ValueError("rotation is not a proper orthonormal matrix")

    @property
    def center(self) -> np.ndarray:
        return self.translation

    @property
    def axes(self) -> np.ndarray:
        """World-space camera x, y, z axes as rows."""
        return self.rotation.T

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
            "R": [float(v) for v in self.rotation.reshape(-1)],
            "t": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
            rotation=np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(d["t"], dtype=np.float64),
            width=int(d["width"]), height=int(d["height"]),
        )

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points (N, 3) to continuous pixel coordinates (N, 2)."""
        pc = (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation
        return np.stack([self.fx * pc[:, 0] / pc[:, 2] + self.cx, self.fy * pc[:, 1] / pc[:, 2] + self.cy], axis=1)


def orthonormality_error(R: np.ndarray) -> float:
    R = np.asarray(R, dtype=np.float64)
    return float(np.abs(R.T @ R - np.eye(3)).max())


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-from-camera rotation for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def pixel_directions(cam: Camera, u: np.ndarray, v: np.ndarray, sub=PIXEL_CENTER) -> np.ndarray:
    """Unit world-space directions for integer pixel arrays (no bounds check)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.stack(
        [(u + sub[0] - cam.cx) / cam.fx, (v + sub[1] - cam.cy) / cam.fy, np.ones_like(u)], axis=-1
    )
    d = d @ cam.rotation.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def pixel_ray(cam: Camera, px, sub=PIXEL_CENTER) -> Ray:
    u, v = px
    if not (0 <= u < cam.width and 0 <= v < cam.height):
        raise ValueError(f"pixel {px} outside {cam.width}x{cam.height} image")
    if not (0 <= sub[0] < 1 and 0 <= sub[1] < 1):
        raise ValueError("sub-pixel offset must lie in [0, 1)")
    d = pixel_directions(cam, np.array(u), np.array(v), sub)
    return Ray(cam.center.copy(), d)


def camera_to_world_normals(cam: Camera, normal_map: np.ndarray, mask: np.ndarray | None = None):
    """Rotate a camera-space normal map to world space.

    Returns the world map and the count of foreground normals that had to
    be renormalised (length off by more than 1e-3).
    """
    n = np.asarray(normal_map, dtype=np.float64)
    length = np.linalg.norm(n, axis=-1)
    fg = length > 0 if mask is None else (np.asarray(mask) > 0.5)
    bad = fg & (np.abs(length - 1.0) > 1e-3)
    safe = np.where(length[..., None] > 0, n / np.maximum(length, 1e-12)[..., None], 0.0)
    out = safe @ cam.rotation.T
    return out, int(bad.sum())


def world_to_camera_normals(cam: Camera, normal_map: np.ndarray) -> np.ndarray:
    return np.asarray(normal_map, dtype=np.float64) @ cam.rotation


def direction_basis(cam: Camera, center_ray: Ray) -> DirectionBasis:
    axes = cam.axes
    V = np.stack([axes[0], axes[1], center_ray.direction])
    det = np.linalg.det(V)
    assert abs(det) > 1e-8, "viewing ray coplanar with the image plane"
    return DirectionBasis(V=V, V_inv=np.linalg.inv(V), m=axes[2].copy())


def view_basis_inverses(cam: Camera, sub=PIXEL_CENTER) -> np.ndarray:
    """Per-pixel V^-1 for a whole view, shape (H, W, 3, 3)."""
    vv, uu = np.mgrid[0 : cam.height, 0 : cam.width]
    d = pixel_directions(cam, uu, vv, sub)
    axes = cam.axes
    V = np.empty((cam.height, cam.width, 3, 3))
    V[..., 0, :] = axes[0]
    V[..., 1, :] = axes[1]
    V[..., 2, :] = d
    det = np.linalg.det(V)
    assert np.all(np.abs(det) > 1e-8), "viewing ray coplanar with the image plane"
    return np.linalg.inv(V)


def ray_sphere_interval(origins: np.ndarray, dirs: np.ndarray, radius: float = 1.0, center=(0.0, 0.0, 0.0)):
    """Entry/exit distances of unit-direction rays against a sphere; NaN on miss."""
    oc = origins - np.asarray(center, dtype=np.float64)
    b = np.einsum("...i,...i->...", oc, dirs)
    c = np.einsum("...i,...i->...", oc, oc) - radius * radius
    disc = b * b - c
    with np.errstate(invalid="ignore"):
        s = np.sqrt(disc)
    t0 = np.where(disc >= 0, -b - s, np.nan)
    t1 = np.where(disc >= 0, -b + s, np.nan)
    return t0, t1


def rotation_about(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K
