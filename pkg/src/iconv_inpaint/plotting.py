"""Figures written next to the CSV / JSONL outputs.  File output only."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data_masks import save_image  # noqa: E402


def _series(rows: list[dict], key: str):
    pts = [(r["step"], r[key]) for r in rows if r.get(key) not in (None, "")]
    if not pts:
        return np.array([]), np.array([])
    s, v = zip(*pts)
    return np.asarray(s, dtype=float), np.asarray(v, dtype=float)


def plot_training_log(rows: list[dict], path) -> Path:
    """Loss components and masked gradient norm against step."""
    path = Path(path)
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.6))
    for key in ("d_loss", "g_loss"):
        s, v = _series(rows, key)
        axes[0].plot(s, v, lw=0.8, label=key)
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("loss")
    axes[0].legend(frameon=False)
    s, v = _series(rows, "grad_norm")
    axes[1].plot(s, v, "o", ms=2.5, label="masked grad norm")
    s, v = _series(rows, "penalty")
    axes[1].plot(s, v, "x", ms=2.5, label="penalty")
    axes[1].axhline(1.0, color="0.6", lw=0.6, ls="--")
    axes[1].set_xlabel("step")
    axes[1].legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_eval(records: list[dict], path, baseline: list[dict] | None = None, key: str = "hole_psnr_db") -> Path:
    """Histogram of a per-image metric, optionally against a baseline."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 3.6))
    vals = np.array([r[key] for r in records if r.get(key) is not None], dtype=float)
    vals = vals[np.isfinite(vals)]
    bins = 20
    ax.hist(vals, bins=bins, alpha=0.7, label=f"model (mean {vals.mean():.2f})" if vals.size else "model")
    if baseline:
        b = np.array([r[key] for r in baseline if r.get(key) is not None], dtype=float)
        b = b[np.isfinite(b)]
        ax.hist(b, bins=bins, alpha=0.6, label=f"baseline (mean {b.mean():.2f})" if b.size else "baseline")
    ax.set_xlabel(key)
    ax.set_ylabel("images")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def montage(real: np.ndarray, mask: np.ndarray, out: np.ndarray, path, max_rows: int = 8) -> Path:
    """Rows of (real, masked input, inpainted) written as one PNG.

    Holes in the masked column are shown in mid grey.
    """
    n = min(len(real), max_rows)
    _, h, w = real.shape[1:]
    pad = 2
    grid = np.full((3, n * (h + pad) + pad, 3 * (w + pad) + pad), 1.0, dtype=np.float32)
    for i in range(n):
        for j, img in enumerate((real[i], real[i] * mask[i], out[i])):
            top = pad + i * (h + pad)
            left = pad + j * (w + pad)
            grid[:, top : top + h, left : left + w] = img if img.shape[0] == 3 else np.repeat(img, 3, 0)
    path = Path(path)
    save_image(grid, path)
    return path

