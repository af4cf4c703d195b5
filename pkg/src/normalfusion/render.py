"""SDF-based volume rendering of normals and opacity over patch samples."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import Camera, pixel_directions, ray_sphere_interval
from .grad import EvalCounter, GradMode, spatial_gradients
from .sampling import OccupancyGrid, ViewSampler, NormalView, update_occupancy


def sdf_to_alpha(f_i, f_next, s):
    """Opacity max((P(f_i) - P(f_next)) / P(f_i), 0) with P the logistic
    sigmoid of sharpness ``s``.  Computed in log space so that saturated
    sigmoids neither underflow nor divide by zero; the result is in [0, 1].
    """
    as_tensor = isinstance(f_i, torch.Tensor) or isinstance(f_next, torch.Tensor)
    f_i = torch.as_tensor(f_i, dtype=torch.float64) if not isinstance(f_i, torch.Tensor) else f_i
    f_next = torch.as_tensor(f_next, dtype=f_i.dtype) if not isinstance(f_next, torch.Tensor) else f_next
    s = torch.as_tensor(s, dtype=f_i.dtype)
    log_ratio = F.logsigmoid(s * f_next) - F.logsigmoid(s * f_i)
    alpha = torch.clamp(-torch.expm1(log_ratio), min=0.0, max=1.0)
    return alpha if as_tensor else float(alpha)


def composite(alphas, grads):
    """Front-to-back compositing along the leading axis.

    Returns (normal, opacity, weights) with weights w_i = T_i alpha_i and
    T_i = prod_{j<i} (1 - alpha_j).
    """
    alphas = torch.as_tensor(alphas, dtype=torch.float64) if not isinstance(alphas, torch.Tensor) else alphas
    grads = torch.as_tensor(grads, dtype=alphas.dtype) if not isinstance(grads, torch.Tensor) else grads
    trans = torch.cumprod(torch.cat([torch.ones_like(alphas[:1]), 1 - alphas[:-1]]), dim=0)
    w = trans * alphas
    return (w[..., None] * grads).sum(0), w.sum(0), w


@dataclass
class RenderedPatches:
    normal: torch.Tensor  # (P, ph, pw, 3), not normalised
    opacity: torch.Tensor  # (P, ph, pw)
    weights: torch.Tensor  # (S, ph, pw)
    alphas: torch.Tensor  # (S, ph, pw)
    transmittance: torch.Tensor  # (S, ph, pw)
    f: torch.Tensor  # (S, ph, pw)
    grad: torch.Tensor  # (S, ph, pw, 3)
    grad_valid: torch.Tensor  # (S, ph, pw)
    counter: EvalCounter


def _padded(samples):
    pid = samples.patch_index
    slot = np.arange(pid.size) - samples.patch_offsets[pid]
    width = int(slot.max()) + 1 if slot.size else 1
    return torch.as_tensor(pid), torch.as_tensor(slot), width


def render_patches(field, samples, mode: GradMode, counter: EvalCounter | None = None,
                   step: float | None = None) -> RenderedPatches:
    """Volume-render every ray of every patch in parallel.

    Samples are scattered into a (patch, slot) padded layout so that the
    transmittance is an ordinary cumulative product along the slot axis;
    the last sample of each ray (and any ray with a single sample) gets
    zero opacity.
    """
    counter = counter if counter is not None else EvalCounter()
    P = samples.n_patches
    ph, pw = samples.V_inv.shape[1:3]
    dtype = field.dtype
    if samples.n_samples == 0:
        z = torch.zeros((0, ph, pw), dtype=dtype)
        return RenderedPatches(torch.zeros((P, ph, pw, 3), dtype=dtype), torch.zeros((P, ph, pw), dtype=dtype),
                               z, z, z, z, torch.zeros((0, ph, pw, 3), dtype=dtype),
                               torch.zeros((0, ph, pw), dtype=torch.bool), counter)
    f, g, valid = spatial_gradients(field, samples, mode, counter, step)
    S = f.shape[0]
    s = field.sharpness.to(dtype)
    last = torch.ones(S, dtype=torch.bool)
    last[:-1] = torch.as_tensor(samples.patch_index[1:] != samples.patch_index[:-1])
    f_next = torch.roll(f, -1, 0)
    alpha = sdf_to_alpha(f, f_next, s)
    alpha = torch.where(last[:, None, None], torch.zeros_like(alpha), alpha)

    pid, slot, width = _padded(samples)
    one_minus = torch.ones((P, width, ph, pw), dtype=dtype).index_put((pid, slot), 1 - alpha)
    trans_pad = torch.cumprod(torch.cat([torch.ones_like(one_minus[:, :1]), one_minus[:, :-1]], dim=1), dim=1)
    trans = trans_pad[pid, slot]
    w = trans * alpha
    normal = torch.zeros((P, ph, pw, 3), dtype=dtype).index_put((torch.as_tensor(samples.patch_index),),
                                                                 w[..., None] * g, accumulate=True)
    # 1 - T_end equals the sum of the weights but cannot round above 1
    opacity = 1 - torch.prod(one_minus, dim=1)
    return RenderedPatches(normal, opacity, w, alpha, trans, f, g, valid, counter)


def render_patches_sequential(field, samples, mode: GradMode, step: float | None = None):
    """Per-ray reference loop used to check the parallel accumulation."""
    f, g, _ = spatial_gradients(field, samples, mode, EvalCounter(), step)
    P = samples.n_patches
    ph, pw = samples.V_inv.shape[1:3]
    s = field.sharpness.to(f.dtype)
    normal = torch.zeros((P, ph, pw, 3), dtype=f.dtype)
    opacity = torch.zeros((P, ph, pw), dtype=f.dtype)
    for p in range(P):
        a, b = samples.patch_offsets[p], samples.patch_offsets[p + 1]
        for i in range(ph):
            for j in range(pw):
                T = torch.ones((), dtype=f.dtype)
                for k in range(a, b):
                    al = sdf_to_alpha(f[k, i, j], f[k + 1, i, j], s) if k + 1 < b else torch.zeros((), dtype=f.dtype)
                    w = T * al
                    normal[p, i, j] = normal[p, i, j] + w * g[k, i, j]
                    opacity[p, i, j] = opacity[p, i, j] + w
                    T = T * (1 - al)
    return normal, opacity


def _tile_centers(n: int, patch: int) -> np.ndarray:
    half = patch // 2
    centers = list(range(half, n - (patch - 1 - half), patch))
    if centers and centers[-1] + (patch - 1 - half) < n - 1:
        centers.append(n - 1 - (patch - 1 - half))
    return np.asarray(centers)


@dataclass
class RenderedView:
    normal: np.ndarray  # (H, W, 3), unit on foreground, zero on background
    opacity: np.ndarray  # (H, W)
    valid: np.ndarray  # (H, W) bool
    counter: EvalCounter


def _sphere_trace(field, origins, dirs, bound, tol=1e-4, max_iter=256, chunk=1 << 15):
    t0, t1 = ray_sphere_interval(origins, dirs, bound)
    hit_any = ~np.isnan(t0)
    t = np.where(hit_any, np.maximum(t0, 0.0), 0.0)
    t_end = np.where(hit_any, t1, -1.0)
    active = hit_any.copy()
    converged = np.zeros_like(active)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        x = origins[idx] + t[idx, None] * dirs[idx]
        x = np.clip(x, -bound, bound)
        vals = np.empty(idx.size)
        with torch.no_grad():
            for i in range(0, idx.size, chunk):
                vals[i : i + chunk] = field.sdf(torch.as_tensor(x[i : i + chunk], dtype=field.dtype)).double().numpy()
        done = np.abs(vals) < tol
        converged[idx[done]] = True
        active[idx[done]] = False
        t[idx[~done]] += vals[~done]
        gone = t > t_end
        active &= ~gone
    return t, converged


def render_full_view(field, cam: Camera, mode: str = "vr-dfd", step: float = 1e-3, grid: OccupancyGrid | None = None,
                     patch: int = 3, bound: float = 1.0, chunk_patches: int = 512) -> RenderedView:
    """Render a whole normal map.

    ``vr-*`` modes tile the image with patches and volume-render them;
    ``sr-ad`` sphere-traces each pixel to |f| < 1e-4 (256 iterations at
    most) and takes the exact gradient at the hit.  Normals are returned
    normalised; pixels whose opacity is ~0 keep a zero normal.
    """
    counter = EvalCounter()
    H, W = cam.height, cam.width
    if mode == "sr-ad":
        vv, uu = np.mgrid[0:H, 0:W]
        dirs = pixel_directions(cam, uu, vv).reshape(-1, 3)
        origins = np.broadcast_to(cam.center, dirs.shape).copy()
        t, ok = _sphere_trace(field, origins, dirs, bound)
        normal = np.zeros((H * W, 3))
        if ok.any():
            x = np.clip(origins[ok] + t[ok, None] * dirs[ok], -bound, bound)
            with torch.no_grad():
                _, g = field.sdf_and_grad(torch.as_tensor(x, dtype=field.dtype))
            g = g.double().numpy()
            normal[ok] = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
            counter.add("rendering", int(ok.sum()))
        return RenderedView(normal.reshape(H, W, 3), ok.reshape(H, W).astype(float), ok.reshape(H, W), counter)

    if not mode.startswith("vr-"):
        raise ValueError(f"unknown rendering mode {mode!r}")
    gmode = GradMode.parse(mode[3:], eps=step if mode == "vr-fd" else None)
    if grid is None:
        grid = update_occupancy(OccupancyGrid(bound=bound), field)
    view = NormalView(cam, np.zeros((H, W, 3)), np.ones((H, W)))
    sampler = ViewSampler([view], patch)
    rows, cols = _tile_centers(H, patch), _tile_centers(W, patch)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    centers = np.stack([np.zeros(rr.size, dtype=np.int64), rr.ravel(), cc.ravel()], axis=1)
    normal = np.zeros((H, W, 3))
    opacity = np.zeros((H, W))
    written = np.zeros((H, W), dtype=bool)
    half = patch // 2
    for i in range(0, centers.shape[0], chunk_patches):
        c = centers[i : i + chunk_patches]
        samples, _ = sampler.build(c, grid, step, bound, with_labels=False)
        with torch.no_grad():
            out = render_patches(field, samples, gmode, counter, step)
        n = out.normal.detach().double().numpy()
        o = out.opacity.detach().double().numpy()
        for p in range(c.shape[0]):
            r0, c0 = c[p, 1] - half, c[p, 2] - half
            sl = (slice(r0, r0 + patch), slice(c0, c0 + patch))
            fresh = ~written[sl]
            normal[sl][fresh] = n[p][fresh]
            opacity[sl][fresh] = o[p][fresh]
            written[sl] |= True
    length = np.linalg.norm(normal, axis=-1, keepdims=True)
    valid = length[..., 0] > 1e-8
    normal = np.where(valid[..., None], normal / np.maximum(length, 1e-12), 0.0)
    return RenderedView(normal, opacity, valid, counter)
