"""Spatial-gradient backends: analytic, axis-aligned FD and directional FD.

The directional backend never evaluates the field beyond the rendering
samples.  Along-ray derivatives come from consecutive samples on the
same ray and across-patch derivatives from neighbouring rays hit by the
same marching plane; both are mapped to world space with the per-pixel
inverse direction matrix.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
import torch

from .field import sdf_batch

MODE_ALIASES = {
    "ad": "analytic", "analytic": "analytic",
    "fd": "axis_fd", "axis_fd": "axis_fd",
    "dfd": "dfd",
}


@dataclass(frozen=True)
class GradMode:
    kind: str
    eps: float | None = None  # axis FD step; None means "current marching step"

    def __post_init__(self):
        if self.kind not in ("analytic", "axis_fd", "dfd"):
            raise ValueError(f"unknown gradient mode {self.kind!r}")
        if self.eps is not None and self.eps <= 0:
            raise ValueError("finite-difference step must be positive")

    @classmethod
    def parse(cls, name: str, eps: float | None = None) -> "GradMode":
        try:
            return cls(MODE_ALIASES[name.lower()], eps)
        except KeyError:
            raise ValueError(f"unknown gradient mode {name!r}") from None

    @property
    def short(self) -> str:
        return {"analytic": "ad", "axis_fd": "fd", "dfd": "dfd"}[self.kind]


@dataclass
class EvalCounter:
    rendering: int = 0
    gradient_extra: int = 0
    culled: int = 0
    by_purpose: dict = dc_field(default_factory=dict)

    @property
    def forward_sdf_evals(self) -> int:
        return self.rendering + self.gradient_extra

    def add(self, purpose: str, n: int) -> None:
        if purpose == "rendering":
            self.rendering += int(n)
        elif purpose == "gradient_extra":
            self.gradient_extra += int(n)
        else:
            self.by_purpose[purpose] = self.by_purpose.get(purpose, 0) + int(n)

    def merge(self, other: "EvalCounter") -> "EvalCounter":
        self.rendering += other.rendering
        self.gradient_extra += other.gradient_extra
        self.culled += other.culled
        for k, v in other.by_purpose.items():
            self.by_purpose[k] = self.by_purpose.get(k, 0) + v
        return self


def directional_derivative_fd(f_plus, f_minus, dt):
    if np.any(np.asarray(dt) <= 0):
        raise ValueError("finite-difference step must be positive")
    return (f_plus - f_minus) / (2 * dt)


def grad_dfd(dd, V_inv):
    """World gradient from directional derivatives ordered as V's rows."""
    if isinstance(dd, torch.Tensor):
        return torch.einsum("...ij,...j->...i", torch.as_tensor(V_inv, dtype=dd.dtype), dd)
    return np.einsum("...ij,...j->...i", V_inv, dd)


_AXES = np.eye(3)


def _stencil(x: torch.Tensor, eps: float) -> torch.Tensor:
    # (N, 6, 3): +x, -x, +y, -y, +z, -z
    offs = torch.as_tensor(np.stack([s * eps * _AXES[a] for a in range(3) for s in (1, -1)]), dtype=x.dtype)
    return x[:, None, :] + offs[None]


def grad_axis_fd(field, x, eps: float, counter: EvalCounter | None = None, bound: float | None = None):
    """Central differences along the world axes; 6 extra evaluations per point."""
    x = torch.as_tensor(x)
    single = x.dim() == 1
    x = x.reshape(-1, 3)
    pts = _stencil(x, eps)
    if bound is not None and bool((pts.abs() > bound).any()):
        raise ValueError("finite-difference stencil leaves the scene bound")
    f = sdf_batch(field, pts.reshape(-1, 3), counter, "gradient_extra").reshape(-1, 6)
    g = torch.stack([directional_derivative_fd(f[:, 2 * a], f[:, 2 * a + 1], eps) for a in range(3)], dim=-1)
    return g[0] if single else g


def grad_directional_fd(field, x, V, eps: float, counter: EvalCounter | None = None):
    """Central differences along the rows of ``V`` (3x3 or per point
    (N, 3, 3)), mapped to world space by solving V g = d."""
    x = torch.as_tensor(x)
    single = x.dim() == 1
    x = x.reshape(-1, 3)
    V = torch.as_tensor(np.asarray(V), dtype=x.dtype).expand(x.shape[0], 3, 3)
    pts = torch.stack([x + s * eps * V[:, a] for a in range(3) for s in (1, -1)], dim=1)
    f = sdf_batch(field, pts.reshape(-1, 3), counter, "gradient_extra").reshape(-1, 6)
    dd = torch.stack([directional_derivative_fd(f[:, 2 * a], f[:, 2 * a + 1], eps) for a in range(3)], dim=-1)
    g = grad_dfd(dd, torch.linalg.inv(V))
    return g[0] if single else g


def _across(F, X, axis_vec, dim):
    """Derivative along ``axis_vec`` across one patch dimension of (S, ph, pw)."""
    n = F.shape[dim]
    if n < 2:
        raise ValueError("patch must be at least 2x2 for directional differences")

    def sl(a, b):
        return F.narrow(dim, a, b - a), X.narrow(dim, a, b - a)

    parts = []
    f_hi, x_hi = sl(1, 2)
    f_lo, x_lo = sl(0, 1)
    parts.append((f_hi - f_lo) / torch.einsum("s...a,sa->s...", x_hi - x_lo, axis_vec))
    if n > 2:
        f_hi, x_hi = sl(2, n)
        f_lo, x_lo = sl(0, n - 2)
        parts.append((f_hi - f_lo) / torch.einsum("s...a,sa->s...", x_hi - x_lo, axis_vec))
    f_hi, x_hi = sl(n - 1, n)
    f_lo, x_lo = sl(n - 2, n - 1)
    parts.append((f_hi - f_lo) / torch.einsum("s...a,sa->s...", x_hi - x_lo, axis_vec))
    return torch.cat(parts, dim=dim)


def dfd_from_samples(f: torch.Tensor, samples):
    """DFD gradients for every sample of a patch sample set.

    ``f`` has shape (S, ph, pw).  Returns gradients (S, ph, pw, 3) and a
    validity mask that is False where a ray sample has no neighbour on
    its own ray.
    """
    S = f.shape[0]
    dtype = f.dtype
    X = torch.as_tensor(samples.positions, dtype=dtype)
    T = torch.as_tensor(samples.t_grid, dtype=dtype)
    pidx = torch.as_tensor(samples.patch_index)
    axes = torch.as_tensor(samples.axes, dtype=dtype)[pidx]  # (S, 3, 3)

    d_x = _across(f, X, axes[:, 0], dim=2)
    d_y = _across(f, X, axes[:, 1], dim=1)

    gap = torch.as_tensor(samples.gap_before)
    has_prev = ~gap
    has_next = torch.zeros(S, dtype=torch.bool)
    if S > 1:
        has_next[:-1] = ~gap[1:]
    f_next = torch.roll(f, -1, 0)
    f_prev = torch.roll(f, 1, 0)
    t_next = torch.roll(T, -1, 0)
    t_prev = torch.roll(T, 1, 0)
    both = (has_prev & has_next)[:, None, None]
    nxt = has_next[:, None, None]
    prv = has_prev[:, None, None]
    num = torch.where(both, f_next - f_prev, torch.where(nxt, f_next - f, f - f_prev))
    den = torch.where(both, t_next - t_prev, torch.where(nxt, t_next - T, T - t_prev))
    valid = (has_prev | has_next)[:, None, None].expand_as(f)
    den = torch.where(valid, den, torch.ones_like(den))
    d_v = torch.where(valid, num / den, torch.zeros_like(num))

    dd = torch.stack([d_x, d_y, d_v], dim=-1)
    V_inv = torch.as_tensor(samples.V_inv, dtype=dtype)[pidx]  # (S, ph, pw, 3, 3)
    g = torch.einsum("sijab,sijb->sija", V_inv, dd)
    g = torch.where(valid[..., None], g, torch.zeros_like(g))
    return g, valid


def spatial_gradients(field, samples, mode: GradMode, counter: EvalCounter | None = None, step: float | None = None):
    """Evaluate the field on all patch samples and their spatial gradients.

    Returns ``(f, grad, valid)`` with shapes (S, ph, pw), (S, ph, pw, 3)
    and (S, ph, pw).
    """
    counter = counter if counter is not None else EvalCounter()
    shape = samples.positions.shape[:3]
    x = torch.as_tensor(samples.positions.reshape(-1, 3), dtype=field.dtype)
    n = x.shape[0]
    if mode.kind == "dfd" and min(shape[1], shape[2]) < 2:
        raise ValueError("directional differences need patches of at least 2x2 pixels")
    if mode.kind == "analytic":
        counter.add("rendering", n)
        f, g = field.sdf_and_grad(x)
        valid = torch.ones(n, dtype=torch.bool)
    elif mode.kind == "axis_fd":
        eps = mode.eps if mode.eps is not None else (step if step is not None else float(np.min(samples.step)))
        f = sdf_batch(field, x, counter, "rendering")
        bound = samples.bound
        pts = _stencil(x, eps)
        valid = (pts.abs() <= bound).all(dim=2).all(dim=1)
        counter.culled += int((~valid).sum())
        pts = pts.clamp(-bound, bound)
        fs = sdf_batch(field, pts.reshape(-1, 3), counter, "gradient_extra").reshape(-1, 6)
        g = torch.stack([directional_derivative_fd(fs[:, 2 * a], fs[:, 2 * a + 1], eps) for a in range(3)], dim=-1)
        g = torch.where(valid[:, None], g, torch.zeros_like(g))
    else:
        f = sdf_batch(field, x, counter, "rendering")
        g, valid = dfd_from_samples(f.reshape(shape), samples)
        return f.reshape(shape), g, valid
    return f.reshape(shape), g.reshape(*shape, 3), valid.reshape(shape)
