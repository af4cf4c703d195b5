"""Scene directories on disk: PFM images, cameras.json, scene.json."""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .field import AnalyticSdf
from .geometry import Camera, camera_to_world_normals, orthonormality_error, pixel_directions
from .mesh_eval import TriMesh
from .sampling import NormalView

log = logging.getLogger(__name__)

# OpenGL cameras look down -z with y up; flipping y and z maps them to ours
_GL_TO_CV = np.diag([1.0, -1.0, -1.0])


class SceneError(ValueError):
    """Invalid or unreadable scene input."""


def write_pfm(path, image: np.ndarray) -> None:
    """Little-endian PFM (negative scale), rows stored bottom to top."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim == 2:
        tag, h, w = "Pf", *img.shape
    elif img.ndim == 3 and img.shape[2] == 3:
        tag, h, w = "PF", img.shape[0], img.shape[1]
    else:
        raise ValueError("PFM holds 1- or 3-channel images")
    with open(path, "wb") as fh:
        fh.write(f"{tag}\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s", data)
    if m is None:
        raise SceneError(f"{path}: not a PFM file")
    tag, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    ch = 3 if tag == b"PF" else 1
    dt = np.dtype("<f4" if scale < 0 else ">f4")
    count = w * h * ch
    if len(data) - m.end() < count * 4:
        raise SceneError(f"{path}: truncated PFM payload")
    img = np.frombuffer(data, dt, count, m.end()).astype(np.float32)
    img = img.reshape(h, w, ch) if ch == 3 else img.reshape(h, w)
    return img[::-1].copy()


@dataclass
class SceneMeta:
    bound_radius: float = 1.0
    axis_convention: str = "opencv"  # or "opengl"
    normals_space: str = "world"  # or "camera"
    unit_scale: float = 0.01  # scene units per "scene-mm"
    analytic: dict | None = None
    extra: dict = dc_field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"bound_radius": self.bound_radius, "axis_convention": self.axis_convention,
             "normals_space": self.normals_space, "unit_scale": self.unit_scale}
        if self.analytic is not None:
            d["analytic"] = self.analytic
        d.update(self.extra)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneMeta":
        d = dict(d)
        known = {k: d.pop(k) for k in ("bound_radius", "axis_convention", "normals_space", "unit_scale", "analytic")
                 if k in d}
        meta = cls(**known, extra=d)
        if meta.axis_convention not in ("opencv", "opengl"):
            raise SceneError(f"unknown axis_convention {meta.axis_convention!r}")
        if meta.normals_space not in ("world", "camera"):
            raise SceneError(f"unknown normals_space {meta.normals_space!r}")
        return meta


@dataclass
class Scene:
    views: list
    meta: SceneMeta
    gt_mesh: TriMesh | None = None
    path: Path | None = None

    @property
    def analytic(self) -> AnalyticSdf | None:
        return AnalyticSdf.from_dict(self.meta.analytic) if self.meta.analytic else None


def _view_name(kind: str, i: int) -> str:
    return f"{kind}_{i:03d}.pfm"


def write_scene(path, views, meta: SceneMeta, gt_mesh: TriMesh | None = None) -> Path:
    """Write world-space normals in OpenCV convention."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = SceneMeta(meta.bound_radius, "opencv", "world", meta.unit_scale, meta.analytic, meta.extra)
    cams = [v.camera.to_dict() for v in views]
    (path / "cameras.json").write_text(json.dumps({"cameras": cams}, indent=1))
    (path / "scene.json").write_text(json.dumps(meta.to_dict(), indent=1, sort_keys=True))
    for i, v in enumerate(views):
        write_pfm(path / _view_name("normal", i), v.normals)
        write_pfm(path / _view_name("mask", i), v.mask)
    if gt_mesh is not None:
        gt_mesh.write_obj(path / "gt_mesh.obj")
    return path


def _load_camera(d: dict, convention: str) -> Camera:
    if convention == "opengl":
        d = dict(d)
        d["R"] = (np.asarray(d["R"], dtype=np.float64).reshape(3, 3) @ _GL_TO_CV).reshape(-1).tolist()
    return Camera.from_dict(d)


def load_scene(path, load_mesh: bool = True) -> Scene:
    """Read and convert a scene directory; raises SceneError when unusable."""
    path = Path(path)
    if not path.is_dir():
        raise SceneError(f"scene directory {path} does not exist")
    try:
        meta = SceneMeta.from_dict(json.loads((path / "scene.json").read_text()))
        cam_dicts = json.loads((path / "cameras.json").read_text())["cameras"]
    except FileNotFoundError as e:
        raise SceneError(f"missing scene file: {e.filename}") from None
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise SceneError(f"malformed scene metadata: {e}") from None
    views = []
    for i, cd in enumerate(cam_dicts):
        try:
            cam = _load_camera(cd, meta.axis_convention)
        except (KeyError, ValueError) as e:
            raise SceneError(f"camera {i}: {e}") from None
        nfile, mfile = path / _view_name("normal", i), path / _view_name("mask", i)
        if not nfile.exists() or not mfile.exists():
            raise SceneError(f"view {i}: missing {nfile.name if not nfile.exists() else mfile.name}")
        n = read_pfm(nfile).astype(np.float64)
        m = read_pfm(mfile).astype(np.float64)
        if n.ndim != 3 or m.ndim != 2 or n.shape[:2] != m.shape or m.shape != (cam.height, cam.width):
            raise SceneError(f"view {i}: image sizes disagree with each other or the camera")
        if meta.normals_space == "camera":
            if meta.axis_convention == "opengl":
                n = n @ _GL_TO_CV
            n, _ = camera_to_world_normals(cam, n, m)
        views.append(NormalView(cam, n, m))
    if not views:
        raise SceneError("scene has no views")
    mesh = None
    if load_mesh and (path / "gt_mesh.obj").exists():
        mesh = TriMesh.read(path / "gt_mesh.obj")
    return Scene(views, meta, mesh, path)


@dataclass(frozen=True)
class Finding:
    severity: str  # "error" or "warning"
    view: int | None
    message: str

    def __str__(self):
        where = f"view {self.view}: " if self.view is not None else ""
        return f"{self.severity}: {where}{self.message}"


def validate_scene(path) -> list[Finding]:
    """Check a scene directory without raising; returns all findings."""
    path = Path(path)
    out: list[Finding] = []
    if not path.is_dir():
        return [Finding("error", None, f"{path} is not a directory")]
    for name in ("scene.json", "cameras.json"):
        if not (path / name).exists():
            out.append(Finding("error", None, f"missing {name}"))
    if out:
        return out
    try:
        meta = SceneMeta.from_dict(json.loads((path / "scene.json").read_text()))
        cams = json.loads((path / "cameras.json").read_text())["cameras"]
    except (json.JSONDecodeError, KeyError, TypeError, SceneError) as e:
        return [Finding("error", None, f"malformed metadata: {e}")]
    n_normals = len(list(path.glob("normal_*.pfm")))
    n_masks = len(list(path.glob("mask_*.pfm")))
    if not (len(cams) == n_normals == n_masks):
        out.append(Finding("error", None, f"view counts differ: {len(cams)} cameras, {n_normals} normal maps, "
                                          f"{n_masks} masks"))
    for i, cd in enumerate(cams):
        try:
            R = np.asarray(cd["R"], dtype=np.float64).reshape(3, 3)
            err = orthonormality_error(R)
            if err > 1e-6 or np.linalg.det(R) < 0:
                out.append(Finding("error", i, f"rotation not orthonormal (error {err:.2e})"))
                continue
            cam = _load_camera(cd, meta.axis_convention)
        except (KeyError, ValueError) as e:
            out.append(Finding("error", i, f"bad camera: {e}"))
            continue
        if np.linalg.norm(cam.center) <= meta.bound_radius:
            out.append(Finding("warning", i, "camera centre lies inside the scene bound"))
        nfile, mfile = path / _view_name("normal", i), path / _view_name("mask", i)
        if not nfile.exists() or not mfile.exists():
            out.append(Finding("error", i, "missing normal or mask file"))
            continue
        try:
            n, m = read_pfm(nfile), read_pfm(mfile)
        except SceneError as e:
            out.append(Finding("error", i, str(e)))
            continue
        if n.ndim != 3 or m.ndim != 2 or n.shape[:2] != m.shape:
            out.append(Finding("error", i, "normal and mask sizes differ or have wrong channel counts"))
            continue
        if m.shape != (cam.height, cam.width):
            out.append(Finding("error", i, "image size disagrees with camera"))
            continue
        fg = m > 0.5
        if not fg.any():
            out.append(Finding("warning", i, "mask has no foreground"))
            continue
        if not np.isfinite(n[fg]).all():
            out.append(Finding("error", i, "non-finite normals in the foreground"))
            continue
        length = np.linalg.norm(n[fg], axis=-1)
        bad = np.abs(length - 1) > 1e-2
        if bad.mean() > 0.01:
            out.append(Finding("warning", i, f"{100 * bad.mean():.1f}% of foreground normals are not unit length"))
        if (length < 1e-6).any():
            out.append(Finding("warning", i, f"{int((length < 1e-6).sum())} foreground pixels have zero normals"))
        if meta.normals_space == "world":
            # normals should face the camera on the visible side
            rows, cols = np.nonzero(fg)
            d = pixel_directions(cam, cols, rows)
            facing = (n[rows, cols] * d).sum(-1)
            if (facing > 0.1).mean() > 0.05:
                out.append(Finding("warning", i, "many foreground normals point away from the camera"))
    if (path / "gt_mesh.obj").exists():
        try:
            TriMesh.read(path / "gt_mesh.obj")
        except (ValueError, IndexError) as e:
            out.append(Finding("error", None, f"gt_mesh.obj unreadable: {e}"))
    return out
