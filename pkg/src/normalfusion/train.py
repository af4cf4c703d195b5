"""Loss, optimiser and the training loop."""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field as dc_field, replace

import numpy as np
import torch

from .field import SdfField
from .grad import EvalCounter, GradMode
from .hashgrid import HashGridConfig
from .render import RenderedPatches, render_patches
from .sampling import OccupancyGrid, StepSchedule, ViewSampler, sample_batch, update_occupancy

log = logging.getLogger(__name__)

BCE_CLAMP = 1e-6
# occupancy band half-width in units of 1/s; the sigmoid is within 1e-3 of
# saturation at this distance from the surface
OPACITY_WIDTHS = 7.0
NORMAL_DOMAINS = ("foreground", "all")


@dataclass(frozen=True)
class LossWeights:
    mask: float = 1.0
    eikonal: float = 1.0

    def __post_init__(self):
        if self.mask < 0 or self.eikonal < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    batches: int = 5000
    patches_per_batch: int = 2048
    patch_size: int = 3
    # every pixel supervised equally often; foreground-only variants bias the
    # surface outward by about one sigmoid width
    center_pool: str = "all"
    normal_domain: str = "all"
    lr: float = 5e-3
    lr_min: float = 1e-4
    warmup: int = 100
    step_start: float = 1e-2
    step_end: float = 5e-4
    occ_resolution: int = 128
    occ_update_every: int = 8
    occ_k: float = 80.0
    occ_tau: float = 0.1
    occ_rule: str = "band"
    occ_hierarchical: bool = True
    grid: HashGridConfig = dc_field(default_factory=HashGridConfig)
    hidden: int = 64
    init_radius: float = 0.7
    init_sharpness: float = 20.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hash: float = 1e-15
    eps_mlp: float = 1e-8
    sharpness_lr_scale: float = 1.0
    weights: LossWeights = dc_field(default_factory=LossWeights)
    seed: int = 0
    deterministic: bool = False
    jitter: bool = True
    bound: float = 1.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.batches < 1 or self.patches_per_batch < 1 or self.patch_size < 1:
            raise ValueError("batch, patch and patch-size counts must be positive")
        if self.normal_domain not in NORMAL_DOMAINS:
            raise ValueError(f"unknown normal domain {self.normal_domain!r}")
        if isinstance(self.grid, dict):
            self.grid = HashGridConfig(**self.grid)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return replace(PRESETS[name], **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


PRESETS = {
    "benchmark": TrainConfig(),
    "highres": TrainConfig(batches=30000),
    # single-core desk scale: smaller tables, fewer patches, coarser final step;
    # with few patches the sharpness gradient is noisy and s lags the hash features.
    # The finest cell matches the pixel footprint of 128x128 views; finer levels
    # are unconstrained by the data and only add normal noise.
    "desk": TrainConfig(
        batches=1500, patches_per_batch=96, step_end=2e-3, sharpness_lr_scale=8.0,
        grid=HashGridConfig(finest_resolution=256, table_size_log2=16),
    ),
}


@dataclass
class LossTerms:
    total: torch.Tensor
    normal: torch.Tensor
    mask: torch.Tensor
    eikonal: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("total", "normal", "mask", "eikonal")}


def loss(rendered: RenderedPatches, normals, mask, weights: LossWeights = LossWeights(),
         normal_domain: str = "all") -> LossTerms:
    """Normal + mask + eikonal terms, each averaged over its own domain.

    The normal term covers every sampled pixel (background targets are zero
    vectors, so rendered normals there are pulled to zero length), or only
    foreground pixels with ``normal_domain="foreground"``; the mask term is binary
    cross-entropy over every pixel with the rendered opacity clamped to
    [1e-6, 1 - 1e-6]; the eikonal term averages (|grad f| - 1)^2 over the
    rendering samples that have a gradient.
    """
    if normal_domain not in NORMAL_DOMAINS:
        raise ValueError(f"unknown normal domain {normal_domain!r}")
    dtype = rendered.opacity.dtype
    normals = torch.as_tensor(normals, dtype=dtype)
    mask = torch.as_tensor(mask, dtype=dtype)
    fg = mask > 0.5
    normals = torch.where(fg[..., None], normals, torch.zeros_like(normals))
    diff = ((rendered.normal - normals) ** 2).sum(-1)
    if normal_domain == "all":
        fg = torch.ones_like(fg)
    normal_term = diff[fg].mean() if bool(fg.any()) else diff.sum() * 0
    o = rendered.opacity.clamp(BCE_CLAMP, 1 - BCE_CLAMP)
    mask_term = -(mask * torch.log(o) + (1 - mask) * torch.log(1 - o)).mean()
    valid = rendered.grad_valid
    if bool(valid.any()):
        eik = ((torch.linalg.norm(rendered.grad[valid], dim=-1) - 1) ** 2).mean()
    else:
        eik = rendered.opacity.sum() * 0
    total = normal_term + weights.mask * mask_term + weights.eikonal * eik
    return LossTerms(total, normal_term, mask_term, eik)


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """One Adam update in place.  ``state`` is a dict holding ``step`` and
    per-parameter first/second moments; it is created on first use.
    ``lr`` and ``eps`` may be per-parameter lists."""
    b1, b2 = betas
    if not state:
        state["step"] = 0
        state["m"] = [torch.zeros_like(p) for p in params]
        state["v"] = [torch.zeros_like(p) for p in params]
    state["step"] += 1
    t = state["step"]
    eps_list = eps if isinstance(eps, (list, tuple)) else [eps] * len(params)
    lr_list = lr if isinstance(lr, (list, tuple)) else [lr] * len(params)
    with torch.no_grad():
        for p, g, m, v, e, lr in zip(params, grads, state["m"], state["v"], eps_list, lr_list):
            if g is None:
                continue
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / (1 - b2**t)).sqrt_().add_(e)
            p.addcdiv_(m, denom, value=-lr / (1 - b1**t))
    return params


def learning_rate(cfg: TrainConfig, batch: int) -> float:
    """Linear warm-up, then cosine decay from ``lr`` to ``lr_min``."""
    if batch < cfg.warmup:
        return cfg.lr * (batch + 1) / cfg.warmup
    span = max(cfg.batches - cfg.warmup, 1)
    a = min((batch - cfg.warmup) / span, 1.0)
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1 + math.cos(math.pi * a))


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good_state=None):
        super().__init__(message)
        self.last_good_state = last_good_state


METRIC_COLUMNS = ["batch", "loss_total", "loss_normal", "loss_mask", "loss_eik", "step_size", "fwd_ms", "bwd_ms",
                  "sdf_evals", "samples", "sharpness"]


@dataclass
class TrainResult:
    field: SdfField
    rows: list
    counter: EvalCounter
    grid: OccupancyGrid
    config: TrainConfig
    mode: GradMode
    fwd_s: float = 0.0
    bwd_s: float = 0.0
    total_s: float = 0.0


def _set_determinism(cfg: TrainConfig):
    torch.manual_seed(cfg.seed)
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def train(views, cfg: TrainConfig, mode: GradMode, sink=None) -> TrainResult:
    """Optimise a fresh field against ``views`` (list of NormalView).

    ``sink`` receives one dict per batch (the metrics row plus timings).
    """
    _set_determinism(cfg)
    rng = np.random.default_rng(cfg.seed)
    field = SdfField(cfg.grid, cfg.hidden, cfg.init_radius, cfg.init_sharpness, cfg.seed, cfg.torch_dtype)
    grid = OccupancyGrid(cfg.occ_resolution, cfg.bound, cfg.occ_k, cfg.occ_tau, cfg.occ_rule)
    grid.opacity_margin = OPACITY_WIDTHS / cfg.init_sharpness
    grid.seed_sphere(cfg.init_radius)
    sampler = ViewSampler(views, cfg.patch_size, cfg.center_pool)
    schedule = StepSchedule(cfg.step_start, cfg.step_end, cfg.batches)
    params = field.hash_parameters() + field.mlp_parameters()
    eps = [cfg.eps_hash] * len(field.hash_parameters()) + [cfg.eps_mlp] * len(field.mlp_parameters())
    lr_scale = [cfg.sharpness_lr_scale if p is field.sharpness_raw else 1.0 for p in params]
    state: dict = {}
    counter = EvalCounter()
    rows = []
    fwd_total = bwd_total = 0.0
    bad_streak = 0
    last_good = copy.deepcopy(field.state_dict())
    t_start = time.perf_counter()
    for b in range(cfg.batches):
        if b > 0 and b % cfg.occ_update_every == 0:
            grid.opacity_margin = OPACITY_WIDTHS / float(field.sharpness.detach())
            update_occupancy(grid, field, hierarchical=cfg.occ_hierarchical)
        step = schedule(b)
        batch_counter = EvalCounter()
        t0 = time.perf_counter()
        samples, labels = sample_batch(sampler, grid, schedule, b, cfg.patches_per_batch, rng, cfg.jitter, cfg.bound)
        out = render_patches(field, samples, mode, batch_counter, step)
        terms = loss(out, labels.normals, labels.mask, cfg.weights, cfg.normal_domain)
        t1 = time.perf_counter()
        vals = terms.as_floats()
        if not all(math.isfinite(v) for v in vals.values()) or vals["total"] > 1e6:
            bad_streak += 1
            log.warning("batch %d (seed %d): non-finite or exploding loss %s; patches %s", b, cfg.seed, vals,
                        labels.view[:4].tolist())
            if bad_streak >= 10:
                raise TrainingDiverged(f"loss diverged for 10 consecutive batches at batch {b}", last_good)
            continue
        bad_streak = 0
        if not terms.total.requires_grad:
            log.warning("batch %d produced no samples; skipping update", b)
            continue
        for p in params:
            p.grad = None
        terms.total.backward()
        lr = learning_rate(cfg, b)
        adam_step(params, [p.grad for p in params], state, [lr * k for k in lr_scale], (cfg.beta1, cfg.beta2), eps)
        t2 = time.perf_counter()
        if b % 100 == 99:
            field.check_finite()
            last_good = copy.deepcopy(field.state_dict())
        fwd_total += t1 - t0
        bwd_total += t2 - t1
        counter.merge(batch_counter)
        row = {
            "batch": b, "loss_total": vals["total"], "loss_normal": vals["normal"], "loss_mask": vals["mask"],
            "loss_eik": vals["eikonal"], "step_size": step, "fwd_ms": 1e3 * (t1 - t0), "bwd_ms": 1e3 * (t2 - t1),
            "sdf_evals": batch_counter.forward_sdf_evals, "samples": samples.n_samples,
            "sharpness": float(field.sharpness.detach()),
        }
        rows.append(row)
        if sink is not None:
            sink(row)
    return TrainResult(field, rows, counter, grid, cfg, mode, fwd_total, bwd_total, time.perf_counter() - t_start)
