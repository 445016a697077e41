"""Wasserstein objectives with masked gradient penalties."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import ShapeError, Tensor, grad, l2_norm, linf_norm, maximum

Critic = Callable[[Tensor], Tensor]


@dataclass
class PenaltyConfig:
    mode: str = "revised"  # "revised" (one-sided hinge) or "legacy" (two-sided)
    p: float = 2.0  # 2 or math.inf
    lam: float = 10.0
    lazy_interval: int = 16
    drift_weight: float = 1e-3
    # scale by lazy_interval on active steps so the average strength stays lam
    rescale_lazy: bool = True

    def __post_init__(self):
        if self.mode not in ("revised", "legacy"):
            raise ValueError(f"unknown penalty mode {self.mode!r}")
        self.p = float(self.p)
        if self.p not in (2.0, math.inf):
            raise ValueError("penalty norm must be 2 or inf")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.lazy_interval < 1:
            raise ValueError("lazy_interval must be >= 1")
        if self.drift_weight < 0:
            raise ValueError("drift weight must be non-negative")

    def active(self, step: int) -> bool:
        return step % self.lazy_interval == 0

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "p": "inf" if math.isinf(self.p) else self.p,
            "lam": self.lam,
            "lazy_interval": self.lazy_interval,
            "drift_weight": self.drift_weight,
            "rescale_lazy": self.rescale_lazy,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PenaltyConfig":
        d = dict(d)
        if d.get("p") in ("inf", "Infinity"):
            d["p"] = math.inf
        return cls(**d)


def interpolate_sample(
    x: Tensor, x_fake: Tensor, rng: np.random.Generator | None = None, t: np.ndarray | None = None
) -> Tensor:
    """Random per-sample point on the segment between real and fake images.

    Returns a fresh leaf with ``requires_grad`` set.
    """
    if x.shape != x_fake.shape:
        raise ShapeError(f"real {x.shape} and fake {x_fake.shape} differ")
    if t is None:
        t = rng.uniform(0.0, 1.0, size=x.shape[0])
    t = np.asarray(t, dtype=x.dtype).reshape((x.shape[0],) + (1,) * (x.ndim - 1))
    mixed = t * x.data + (1 - t) * x_fake.data
    return Tensor(mixed.astype(x.dtype), requires_grad=True)


def masked_gradient_norm(critic: Critic, x_hat: Tensor, mask: Tensor, p: float = 2.0) -> Tensor:
    """Per-sample norm of dD/dx restricted to the hole (mask == 0).

    The result stays on the tape so it can be differentiated w.r.t. the
    critic parameters.
    """
    scores = critic(x_hat)
    if scores.ndim != 1 or scores.shape[0] != x_hat.shape[0]:
        raise ShapeError(f"critic must return one score per sample, got {scores.shape}")
    (g,) = grad(scores.sum(), [x_hat], create_graph=True)
    g = g * (1.0 - mask)
    axes = tuple(range(1, g.ndim))
    if math.isinf(p):
        return linf_norm(g, axis=axes)
    return l2_norm(g, axis=axes)


def penalty_from_norms(norms: Tensor, cfg: PenaltyConfig) -> Tensor:
    if cfg.mode == "revised":
        per_sample = maximum(norms - 1.0, 0.0)
    else:
        per_sample = (norms - 1.0) ** 2
    return per_sample.mean() * cfg.lam


def gradient_penalty(critic: Critic, x_hat: Tensor, mask: Tensor, cfg: PenaltyConfig) -> tuple[Tensor, Tensor]:
    """Return ``(penalty, norms)``; the norms are handy for logging."""
    norms = masked_gradient_norm(critic, x_hat, mask, cfg.p)
    return penalty_from_norms(norms, cfg), norms


def wgan_losses(d_real: Tensor, d_fake: Tensor) -> tuple[Tensor, Tensor]:
    if d_real.shape != d_fake.shape:
        raise ShapeError("real and fake score batches differ in size")
    critic = d_fake.mean() - d_real.mean()
    generator = -d_fake.mean()
    return critic, generator


def drift_penalty(d_real: Tensor, weight: float = 1e-3) -> Tensor:
    return (d_real * d_real).mean() * weight
