"""Matplotlib figures written next to the CSV/JSON reports."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SAVE = {"dpi": 110, "metadata": {"Software": None, "CreationDate": None}}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def loss_curves(rows: list[dict], path, title: str = "") -> Path:
    b = np.array([r["batch"] for r in rows])
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(10, 3.6))
    for key, label in (("loss_total", "total"), ("loss_normal", "normal"), ("loss_mask", "mask"),
                       ("loss_eik", "eikonal")):
        ax.semilogy(b, np.maximum([r[key] for r in rows], 1e-12), label=label, lw=1)
    ax.set_xlabel("batch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.set_title(title or "training losses")
    ax2.semilogy(b, [r["step_size"] for r in rows], color="k", lw=1)
    ax2.set_xlabel("batch")
    ax2.set_ylabel("marching step")
    return _save(fig, path)


def bench_bars(summary: list[dict], path) -> Path:
    modes = [s["mode"] for s in summary]
    fwd = np.array([s["fwd_ms"] for s in summary]) / 1e3
    bwd = np.array([s["bwd_ms"] for s in summary]) / 1e3
    evals = np.array([s["forward_evals"] for s in summary], dtype=float)
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    x = np.arange(len(modes))
    ax.bar(x, fwd, label="forward")
    ax.bar(x, bwd, bottom=fwd, label="backward")
    ax.set_xticks(x, modes)
    ax.set_ylabel("wall time [s]")
    ax.legend(fontsize=8)
    ax2.bar(x, evals / max(evals.min(), 1), color="tab:gray")
    ax2.set_xticks(x, modes)
    ax2.set_ylabel("SDF evaluations (relative)")
    return _save(fig, path)


def normal_map(normals: np.ndarray, mask: np.ndarray | None, path, error_deg: np.ndarray | None = None) -> Path:
    """Normal map as RGB ((n + 1) / 2), optionally beside an angular-error map."""
    img = np.clip((np.asarray(normals) + 1) / 2, 0, 1)
    if mask is not None:
        img = np.where((np.asarray(mask) > 0.5)[..., None], img, 1.0)
    cols = 2 if error_deg is not None else 1
    fig, axes = plt.subplots(1, cols, figsize=(4 * cols, 4), squeeze=False)
    axes[0, 0].imshow(img)
    axes[0, 0].set_title("normals")
    if error_deg is not None:
        im = axes[0, 1].imshow(error_deg, cmap="magma", vmin=0, vmax=max(10.0, float(np.nanmax(error_deg) or 0)))
        axes[0, 1].set_title(f"angular error (mean {np.nanmean(error_deg):.2f} deg)")
        fig.colorbar(im, ax=axes[0, 1], fraction=0.046)
    for a in axes.ravel():
        a.axis("off")
    return _save(fig, path)
