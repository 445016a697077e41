"""Reconstruction metrics on the [0, 1] scale.

Inputs are images in [-1, 1] (the network range) and are mapped with
``(x + 1) / 2`` first; PSNR depends on that choice.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class MetricReport:
    l1: float
    l2: float
    psnr_db: float
    ssim: float
    region: str = "full"

    def to_dict(self) -> dict:
        return asdict(self)


def to_unit(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0


def _selected(a: np.ndarray, b: np.ndarray, region: Optional[np.ndarray]):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if region is None:
        return a.ravel(), b.ravel()
    sel = np.broadcast_to(np.asarray(region, dtype=bool), a.shape)
    if not sel.any():
        raise ValueError("selected region is empty")
    return a[sel], b[sel]


def l1(a, b, region=None) -> float:
    x, y = _selected(a, b, region)
    return float(np.mean(np.abs(x - y)))


def l2(a, b, region=None) -> float:
    x, y = _selected(a, b, region)
    return float(np.mean((x - y) ** 2))


def psnr(a, b, region=None) -> float:
    mse = l2(a, b, region)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    # separable Gaussian, then keep only fully supported positions
    out = correlate1d(img, win, axis=-2, mode="constant")
    out = correlate1d(out, win, axis=-1, mode="constant")
    r = len(win) // 2
    return out[..., r : img.shape[-2] - r, r : img.shape[-1] - r]


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-channel local SSIM over fully supported 11x11 windows, shape [C,H-10,W-10]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    win = gaussian_window()
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a**2
    var_b = _filter_valid(b * b, win) - mu_b**2
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a, b, region=None) -> float:
    """Mean SSIM, channel-averaged.

    With ``region`` the map is averaged only over window centres inside the
    region; returns NaN when no centre qualifies.
    """
    if np.array_equal(np.asarray(a), np.asarray(b)):
        return 1.0
    m = ssim_map(a, b)
    if region is None:
        return float(m.mean())
    r = SSIM_WINDOW // 2
    sel = np.asarray(region, dtype=bool)
    sel = sel.reshape((-1,) + sel.shape[-2:])[..., r:-r, r:-r]
    sel = np.broadcast_to(sel, m.shape)
    if not sel.any():
        return float("nan")
    return float(m[sel].mean())


def evaluate_pair(pred: np.ndarray, target: np.ndarray, mask: Optional[np.ndarray] = None) -> dict:
    """Metrics over the whole image and, when ``mask`` is given, over its holes.

    Images are [C,H,W] in [-1, 1]; ``mask`` is [1,H,W] with 0 on holes.
    """
    a, b = to_unit(pred), to_unit(target)
    out = {"full": MetricReport(l1(a, b), l2(a, b), psnr(a, b), ssim(a, b), "full")}
    if mask is not None:
        hole = np.asarray(mask) < 0.5
        if hole.any():
            out["hole"] = MetricReport(
                l1(a, b, hole), l2(a, b, hole), psnr(a, b, hole), ssim(a, b, hole), "hole"
            )
    return out
