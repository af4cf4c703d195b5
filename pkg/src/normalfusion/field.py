"""Signed distance fields: the hash-encoded neural SDF and analytic oracles.

Every field exposes the same small surface used by rendering and
gradient code:

* ``sdf(x)`` -> (N,) values for an (N, 3) tensor,
* ``sdf_and_grad(x)`` -> values plus the exact spatial gradient, and
* ``sharpness`` -> the positive scalar ``s`` of the opacity sigmoid.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .hashgrid import HashEncode, HashGrid, HashGridConfig, HashJacobian

CHECKPOINT_MAGIC = b"NFSDF\x00\x00\x00"
CHECKPOINT_VERSION = 1


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = math.pi * (1 + 5**0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


class SdfField(torch.nn.Module):
    """f(x) = w2 . relu(W1 [h(x); x] + b1) + b2 over a multi-resolution hash grid.

    Geometric initialisation places the hidden-unit hyperplanes through
    the origin with normals spread evenly over the sphere, so that
    f(x) ~ |x| - init_radius before training.
    """

    def __init__(
        self,
        grid_cfg: HashGridConfig | None = None,
        hidden: int = 64,
        init_radius: float = 0.7,
        init_sharpness: float = 20.0,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.grid_cfg = grid_cfg or HashGridConfig()
        self.grid = HashGrid(self.grid_cfg)
        self.hidden = hidden
        self.init_radius = init_radius
        self.init_sharpness = init_sharpness
        self.seed = seed
        rng = np.random.default_rng(seed)
        width = self.grid_cfg.width
        fpl = self.grid_cfg.features_per_level

        table = rng.uniform(-1e-4, 1e-4, size=(self.grid.n_rows, fpl))
        W1 = np.zeros((hidden, width + 3))
        W1[:, width:] = fibonacci_sphere(hidden) @ _random_rotation(rng).T
        # E[relu(d . x)] = |x| / 4 for d uniform on the unit sphere
        w2 = 4.0 / hidden + rng.normal(scale=1e-5, size=hidden)

        def p(a):
            return torch.nn.Parameter(torch.as_tensor(np.asarray(a), dtype=dtype))

        self.table = p(table)
        self.W1 = p(W1)
        self.b1 = p(np.zeros(hidden))
        self.w2 = p(w2)
        self.b2 = p(-init_radius)
        self.sharpness_raw = p(math.log(init_sharpness))

    @property
    def sharpness(self) -> torch.Tensor:
        return torch.exp(self.sharpness_raw)

    @property
    def dtype(self) -> torch.dtype:
        return self.table.dtype

    def hash_parameters(self):
        return [self.table]

    def mlp_parameters(self):
        return [self.W1, self.b1, self.w2, self.b2, self.sharpness_raw]

    def _hidden(self, x):
        width = self.grid_cfg.width
        enc = HashEncode.apply(x, self.table, self.grid)
        return enc @ self.W1[:, :width].T + x @ self.W1[:, width:].T + self.b1

    def sdf(self, x: torch.Tensor) -> torch.Tensor:
        x = x.to(self.dtype)
        return torch.relu(self._hidden(x)) @ self.w2 + self.b2

    forward = sdf

    def sdf_and_grad(self, x: torch.Tensor):
        """Values and exact spatial gradient; the gradient stays differentiable
        with respect to every parameter (second-order path through the
        interpolation weights)."""
        x = x.to(self.dtype)
        width = self.grid_cfg.width
        z = self._hidden(x)
        f = torch.relu(z) @ self.w2 + self.b2
        gate = (z > 0).to(self.dtype) * self.w2
        jac = HashJacobian.apply(x, self.table, self.grid)
        v = gate @ self.W1[:, :width]
        grad = torch.einsum("nk,nka->na", v, jac) + gate @ self.W1[:, width:]
        return f, grad

    def check_finite(self):
        for name, prm in self.named_parameters():
            bad = ~torch.isfinite(prm.detach())
            if bad.any():
                where = tuple(int(i) for i in torch.nonzero(bad)[0]) if prm.dim() else ()
                raise FloatingPointError(f"non-finite parameter {name}{list(where)}")

    def config_dict(self) -> dict:
        return {
            "grid": asdict(self.grid_cfg),
            "hidden": self.hidden,
            "init_radius": self.init_radius,
            "init_sharpness": self.init_sharpness,
            "seed": self.seed,
        }


class AnalyticSdf:
    """Closed-form SDFs used as ground truth and as test oracles.

    ``sphere`` and ``torus`` (axis along z) are exact distance functions.
    ``union`` is the polynomial smooth minimum of two spheres; it is a
    valid implicit surface but only approximately a distance field.
    """

    def __init__(self, kind: str, sharpness: float = 200.0, **params):
        if kind not in ("sphere", "torus", "union"):
            raise ValueError(f"unknown analytic shape {kind!r}")
        self.kind = kind
        self.params = {k: (list(map(float, v)) if isinstance(v, (list, tuple, np.ndarray)) else float(v))
                       for k, v in params.items()}
        self._sharpness = torch.tensor(float(sharpness), dtype=torch.float64)

    @classmethod
    def sphere(cls, radius=0.5, center=(0.0, 0.0, 0.0), **kw):
        return cls("sphere", radius=radius, center=center, **kw)

    @classmethod
    def torus(cls, major=0.35, minor=0.12, center=(0.0, 0.0, 0.0), **kw):
        return cls("torus", major=major, minor=minor, center=center, **kw)

    @classmethod
    def union(cls, c1=(-0.2, 0.0, 0.0), r1=0.3, c2=(0.25, 0.0, 0.0), r2=0.25, k=0.1, **kw):
        return cls("union", c1=c1, r1=r1, c2=c2, r2=r2, k=k, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "AnalyticSdf":
        d = dict(d)
        return cls(d.pop("kind"), **d)

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}

    @property
    def sharpness(self) -> torch.Tensor:
        return self._sharpness

    @property
    def dtype(self):
        return torch.float64

    def extent(self) -> float:
        """Radius of the smallest origin-centred ball containing the shape."""
        p = self.params
        if self.kind == "sphere":
            return float(np.linalg.norm(p["center"]) + p["radius"])
        if self.kind == "torus":
            return float(np.linalg.norm(p["center"]) + p["major"] + p["minor"])
        return float(max(np.linalg.norm(p["c1"]) + p["r1"], np.linalg.norm(p["c2"]) + p["r2"]))

    def _eval(self, x):
        p = self.params
        if self.kind == "sphere":
            return torch.linalg.norm(x - x.new_tensor(p["center"]), dim=-1) - p["radius"]
        if self.kind == "torus":
            q = x - x.new_tensor(p["center"])
            rho = torch.sqrt(q[:, 0] ** 2 + q[:, 1] ** 2)
            return torch.sqrt((rho - p["major"]) ** 2 + q[:, 2] ** 2) - p["minor"]
        d1 = torch.linalg.norm(x - x.new_tensor(p["c1"]), dim=-1) - p["r1"]
        d2 = torch.linalg.norm(x - x.new_tensor(p["c2"]), dim=-1) - p["r2"]
        k = p["k"]
        h = torch.clamp(0.5 + 0.5 * (d2 - d1) / k, 0.0, 1.0)
        return d2 * (1 - h) + d1 * h - k * h * (1 - h)

    def sdf(self, x: torch.Tensor) -> torch.Tensor:
        return self._eval(torch.as_tensor(x, dtype=torch.float64))

    __call__ = sdf

    def sdf_and_grad(self, x: torch.Tensor):
        x = torch.as_tensor(x, dtype=torch.float64)
        p = self.params
        if self.kind == "sphere":
            d = x - x.new_tensor(p["center"])
            n = torch.linalg.norm(d, dim=-1, keepdim=True)
            return n[:, 0] - p["radius"], d / n
        if self.kind == "torus":
            q = x - x.new_tensor(p["center"])
            rho = torch.sqrt(q[:, 0] ** 2 + q[:, 1] ** 2)
            a = rho - p["major"]
            qn = torch.sqrt(a**2 + q[:, 2] ** 2)
            g = torch.stack([a / qn * q[:, 0] / rho, a / qn * q[:, 1] / rho, q[:, 2] / qn], dim=-1)
            return qn - p["minor"], g
        with torch.enable_grad():
            xr = x.detach().clone().requires_grad_(True)
            f = self._eval(xr)
            (g,) = torch.autograd.grad(f.sum(), xr)
        return f.detach(), g

    def numpy_sdf(self, x: np.ndarray) -> np.ndarray:
        return self.sdf(torch.from_numpy(np.asarray(x, dtype=np.float64).reshape(-1, 3))).numpy()

    def numpy_grad(self, x: np.ndarray) -> np.ndarray:
        return self.sdf_and_grad(torch.from_numpy(np.asarray(x, dtype=np.float64).reshape(-1, 3)))[1].numpy()


def sdf_batch(field, xs, counter=None, purpose: str = "rendering") -> torch.Tensor:
    """Batched evaluation; the returned tensor carries the autograd tape."""
    xs = torch.as_tensor(xs)
    if counter is not None:
        counter.add(purpose, xs.shape[0])
    return field.sdf(xs)


def sdf(field, x) -> float:
    """Single-point evaluation as a Python float."""
    if isinstance(field, SdfField):
        field.check_finite()
    with torch.no_grad():
        return float(field.sdf(torch.as_tensor(np.asarray(x, dtype=np.float64).reshape(1, 3)))[0])


def analytic_spatial_gradient(field, x) -> np.ndarray:
    with torch.no_grad():
        _, g = field.sdf_and_grad(torch.as_tensor(np.asarray(x, dtype=np.float64).reshape(-1, 3)))
    g = g.detach().to(torch.float64).numpy()
    return g[0] if np.ndim(x) == 1 else g


def save_checkpoint(field: SdfField, path, extra: dict | None = None) -> None:
    """Binary layout: magic, u32 version, u32 config length, UTF-8 JSON config,
    then little-endian float32 blobs: table (level-major, row-major), W1
    (row-major), b1, w2, b2, sharpness_raw."""
    cfg = field.config_dict()
    if extra:
        cfg["extra"] = extra
    blob = json.dumps(cfg, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for prm in (field.table, field.W1, field.b1, field.w2, field.b2, field.sharpness_raw):
            fh.write(prm.detach().cpu().numpy().astype("<f4").tobytes(order="C"))


def load_checkpoint(path, dtype: torch.dtype = torch.float32) -> SdfField:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a field checkpoint")
    version, n = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    cfg = json.loads(data[16 : 16 + n])
    field = SdfField(
        HashGridConfig(**cfg["grid"]), hidden=cfg["hidden"], init_radius=cfg["init_radius"],
        init_sharpness=cfg["init_sharpness"], seed=cfg["seed"], dtype=dtype,
    )
    offset = 16 + n
    with torch.no_grad():
        for prm in (field.table, field.W1, field.b1, field.w2, field.b2, field.sharpness_raw):
            count = prm.numel()
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
            prm.copy_(torch.from_numpy(arr.reshape(prm.shape).astype(np.float64)))
            offset += 4 * count
    if offset != len(data):
        raise ValueError("checkpoint has trailing or missing bytes")
    return field
