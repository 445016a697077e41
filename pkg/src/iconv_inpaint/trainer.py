"""Adversarial training loop, optimizer, weight averaging and persistence."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data_masks import FreeFormParams, gen_center_mask, gen_freeform_mask, synth_dataset
from .losses import (
    PenaltyConfig,
    drift_penalty,
    gradient_penalty,
    interpolate_sample,
    wgan_losses,
)
from .metrics import evaluate_pair
from .models import (
    Discriminator,
    Generator,
    NetworkConfig,
    build_discriminator,
    build_generator,
    composite_output,
)
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

LOG_FIELDS = ["step", "d_loss", "g_loss", "penalty", "drift", "grad_norm", "d_real", "d_fake", "seconds"]


@dataclass
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.0
    beta2: float = 0.99
    adam_eps: float = 1e-8
    batch_size: int = 8
    total_steps: int = 1000
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    ema_decay: float = 0.999
    critic_steps_per_g: int = 1
    seed: int = 0
    checkpoint_interval: int = 500
    sample_interval: int = 500
    mask_length_frac: float = 0.25

    def __post_init__(self):
        if isinstance(self.penalty, dict):
            self.penalty = PenaltyConfig.from_dict(self.penalty)
        if self.lr < 0 or self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("lr, batch_size and total_steps must be non-negative/positive")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")
        if self.critic_steps_per_g < 1:
            raise ValueError("critic_steps_per_g must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["penalty"] = self.penalty.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class TrainingHalted(RuntimeError):
    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


class Adam:
    """Adam with bias correction; moments are float arrays keyed by parameter name."""

    def __init__(self, named_params, lr=0.001, betas=(0.0, 0.99), eps=1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            upd = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - upd).astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def ema_update(ema: dict, params: dict, decay: float) -> dict:
    """In place ``ema <- decay*ema + (1-decay)*params``; returns ``ema``."""
    for k, p in params.items():
        e = ema[k]
        src = p.data if isinstance(p, Tensor) else p
        if decay == 1.0:
            continue
        if decay == 0.0:
            e[...] = src
            continue
        e *= decay
        e += (1.0 - decay) * src
    return ema


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Independent stream per (seed, step); resuming needs nothing but the step."""
    return np.random.default_rng([int(seed), int(step)])


@dataclass
class Batch:
    real: np.ndarray
    mask: np.ndarray
    z: np.ndarray
    t: np.ndarray
    pose: Optional[np.ndarray] = None


def make_batch(net: NetworkConfig, cfg: TrainConfig, step: int) -> Batch:
    rng = step_rng(cfg.seed, step)
    R = net.max_resolution
    real = synth_dataset(cfg.batch_size, R, rng)
    params = FreeFormParams(max_length_frac=cfg.mask_length_frac)
    mask = np.stack([gen_freeform_mask(R, R, params, rng) for _ in range(cfg.batch_size)])
    z = rng.standard_normal((cfg.batch_size, net.latent_dim))
    t = rng.uniform(0.0, 1.0, cfg.batch_size)
    pose = rng.uniform(0.0, 1.0, (cfg.batch_size, net.num_keypoints * 2)) if net.use_pose else None
    dt = net.np_dtype
    return Batch(
        real.astype(dt),
        mask.astype(dt),
        z.astype(dt),
        t,
        None if pose is None else pose.astype(dt),
    )


class TrainState:
    def __init__(self, net: NetworkConfig, cfg: TrainConfig):
        self.net = net
        self.cfg = cfg
        root = np.random.default_rng([cfg.seed, 0xC0FFEE])
        self.G: Generator = build_generator(net, root)
        self.D: Discriminator = build_discriminator(net, root)
        betas = (cfg.beta1, cfg.beta2)
        self.opt_g = Adam(self.G.named_parameters(), cfg.lr, betas, cfg.adam_eps)
        self.opt_d = Adam(self.D.named_parameters(), cfg.lr, betas, cfg.adam_eps)
        self.ema = self.G.state_dict()
        self.step = 0
        self.history: list[dict] = []

    def ema_generator(self) -> Generator:
        G = build_generator(self.net, 0)
        G.load_state_dict(self.ema)
        return G

    # -- persistence ------------------------------------------------------
    def save(self, path) -> None:
        tensors = {}
        for prefix, sd in (("G", self.G.state_dict()), ("D", self.D.state_dict()), ("ema", self.ema)):
            for k, v in sd.items():
                tensors[f"{prefix}/{k}"] = v
        for prefix, opt in (("opt_g", self.opt_g), ("opt_d", self.opt_d)):
            for k in opt.params:
                tensors[f"{prefix}/m/{k}"] = opt.m[k]
                tensors[f"{prefix}/v/{k}"] = opt.v[k]
        meta = {
            "network": self.net.to_dict(),
            "train": self.cfg.to_dict(),
            "step": self.step,
            "opt_g_t": self.opt_g.t,
            "opt_d_t": self.opt_d.t,
            "rng": {"scheme": "default_rng([seed, step])", "seed": self.cfg.seed, "next_step": self.step},
        }
        save_checkpoint(path, tensors, meta)

    @classmethod
    def load(cls, path, cfg_override: Optional[TrainConfig] = None) -> "TrainState":
        tensors, meta = load_checkpoint(path)
        try:
            net = NetworkConfig.from_dict(meta["network"])
            cfg = cfg_override or TrainConfig.from_dict(meta["train"])
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"{path}: missing or invalid config echo") from exc
        state = cls(net, cfg)

        def take(prefix):
            p = prefix + "/"
            return {k[len(p) :]: v for k, v in tensors.items() if k.startswith(p)}

        try:
            state.G.load_state_dict(take("G"))
            state.D.load_state_dict(take("D"))
            ema = take("ema")
            if set(ema) != set(state.ema):
                raise KeyError("ema parameter names differ")
            state.ema = {k: v.copy() for k, v in ema.items()}
            for prefix, opt in (("opt_g", state.opt_g), ("opt_d", state.opt_d)):
                m, v = take(prefix + "/m"), take(prefix + "/v")
                if set(m) != set(opt.params) or set(v) != set(opt.params):
                    raise KeyError(f"{prefix} moment names differ")
                opt.m = {k: a.copy() for k, a in m.items()}
                opt.v = {k: a.copy() for k, a in v.items()}
            state.opt_g.t = int(meta["opt_g_t"])
            state.opt_d.t = int(meta["opt_d_t"])
            state.step = int(meta["step"])
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{path}: {exc}") from exc
        return state


def _grad_norm(params) -> float:
    sq = sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params if p.grad is not None)
    return math.sqrt(sq)


def _finite(*values) -> bool:
    return all(math.isfinite(v) for v in values if v is not None)


def train_step(state: TrainState, batch: Batch) -> dict:
    """One critic update, one generator update, one EMA update."""
    t0 = time.perf_counter()
    cfg, G, D = state.cfg, state.G, state.D
    real = Tensor(batch.real)
    mask = Tensor(batch.mask)
    z = Tensor(batch.z)
    pose = None if batch.pose is None else Tensor(batch.pose)

    raw = G(real * mask, mask, z, pose)
    fake = composite_output(raw, real, mask)
    fake_const = fake.detach()

    def critic(x):
        return D(x, mask, pose)

    penalty_value = norm_value = None
    for _ in range(cfg.critic_steps_per_g):
        d_real = critic(real)
        d_fake = critic(fake_const)
        d_adv, _ = wgan_losses(d_real, d_fake)
        drift = drift_penalty(d_real, cfg.penalty.drift_weight)
        d_total = d_adv + drift
        if cfg.penalty.active(state.step):
            x_hat = interpolate_sample(real, fake_const, t=batch.t)
            pen, norms = gradient_penalty(critic, x_hat, mask, cfg.penalty)
            if cfg.penalty.rescale_lazy:
                pen = pen * float(cfg.penalty.lazy_interval)
            d_total = d_total + pen
            penalty_value = pen.item()
            norm_value = float(np.mean(norms.data))
        state.opt_d.zero_grad()
        backward(d_total, D.parameters())
        d_grad = _grad_norm(D.parameters())
        if not _finite(d_total.item(), d_grad):
            raise TrainingHalted(
                f"non-finite critic loss at step {state.step}",
                {"step": state.step, "d_loss": d_total.item(), "d_grad_norm": d_grad},
            )
        state.opt_d.step()

    g_loss = -critic(fake).mean()
    state.opt_g.zero_grad()
    backward(g_loss, G.parameters())
    g_grad = _grad_norm(G.parameters())
    if not _finite(g_loss.item(), g_grad):
        raise TrainingHalted(
            f"non-finite generator loss at step {state.step}",
            {"step": state.step, "g_loss": g_loss.item(), "g_grad_norm": g_grad, "d_grad_norm": d_grad},
        )
    state.opt_g.step()
    ema_update(state.ema, dict(G.named_parameters()), cfg.ema_decay)

    row = {
        "step": state.step,
        "d_loss": d_total.item(),
        "g_loss": g_loss.item(),
        "penalty": penalty_value,
        "drift": drift.item(),
        "grad_norm": norm_value,
        "d_real": float(d_real.data.mean()),
        "d_fake": float(d_fake.data.mean()),
        "seconds": time.perf_counter() - t0,
    }
    state.step += 1
    state.history.append(row)
    return row


def _num_threads() -> int:
    try:
        return max(1, int(os.environ.get("ICONV_NUM_THREADS", "1")))
    except ValueError:
        return 1


def _batches(net: NetworkConfig, cfg: TrainConfig, start: int, stop: int):
    """Yield batches for steps [start, stop); prefetches on worker threads if allowed."""
    workers = _num_threads()
    if workers <= 1:
        for s in range(start, stop):
            yield make_batch(net, cfg, s)
        return
    depth = 2 * workers
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = {}
        nxt = start
        for s in range(start, stop):
            while nxt < stop and nxt < s + depth:
                pending[nxt] = pool.submit(make_batch, net, cfg, nxt)
                nxt += 1
            yield pending.pop(s).result()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def train(
    state: TrainState,
    steps: int,
    out_dir=None,
    on_step: Optional[Callable[[TrainState, dict], None]] = None,
) -> list[dict]:
    """Run ``steps`` training steps from ``state.step``; returns the new log rows.

    With ``out_dir`` the CSV log is appended to ``out_dir/log.csv`` and
    periodic checkpoints go to ``out_dir/checkpoints``.
    """
    rows = []
    writer = fh = None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_path = out / "log.csv"
        new = not log_path.exists()
        fh = open(log_path, "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(LOG_FIELDS)
    try:
        start = state.step
        for batch in _batches(state.net, state.cfg, start, start + steps):
            try:
                row = train_step(state, batch)
            except TrainingHalted as exc:
                if out is not None:
                    (out / "halt.json").write_text(json.dumps(exc.record, indent=2))
                raise
            rows.append(row)
            if writer is not None:
                writer.writerow([_fmt(row[k]) for k in LOG_FIELDS])
                fh.flush()
            if out is not None and state.cfg.checkpoint_interval and state.step % state.cfg.checkpoint_interval == 0:
                state.save(out / "checkpoints" / f"step_{state.step:06d}.ckpt")
            if on_step is not None:
                on_step(state, row)
    finally:
        if fh is not None:
            fh.close()
    return rows


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def meanfill(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Fill holes with the per-channel mean of the known pixels."""
    known = np.broadcast_to(mask > 0.5, image.shape)
    out = image.copy()
    for c in range(image.shape[0]):
        vals = image[c][known[c]]
        fill = vals.mean() if vals.size else 0.0
        out[c][~known[c]] = fill
    return out


def inpaint(G: Generator, images: np.ndarray, masks: np.ndarray, z: Optional[np.ndarray] = None, pose=None) -> np.ndarray:
    """Composited generator output for a batch; z defaults to all zeros."""
    n = images.shape[0]
    dt = G.cfg.np_dtype
    if z is None:
        z = np.zeros((n, G.cfg.latent_dim), dtype=dt)
    with no_grad():
        img = Tensor(images.astype(dt))
        m = Tensor(masks.astype(dt))
        raw = G(img * m, m, Tensor(np.asarray(z, dtype=dt)), None if pose is None else Tensor(pose.astype(dt)))
        return composite_output(raw, img, m).data


def eval_set(net: NetworkConfig, n: int, seed: int, mask_mode: str = "freeform", mask_length_frac: float = 0.25):
    """Deterministic held-out images and masks (disjoint stream from training)."""
    rng = np.random.default_rng([int(seed), 0xE7A1])
    R = net.max_resolution
    images = synth_dataset(n, R, rng)
    if mask_mode == "center":
        masks = np.stack([gen_center_mask(R, R, 0.5) for _ in range(n)])
    elif mask_mode == "freeform":
        params = FreeFormParams(max_length_frac=mask_length_frac)
        masks = np.stack([gen_freeform_mask(R, R, params, rng) for _ in range(n)])
    else:
        raise ValueError(f"unknown mask mode {mask_mode!r}")
    return images, masks


def evaluate(
    G: Optional[Generator],
    images: np.ndarray,
    masks: np.ndarray,
    baseline: Optional[str] = None,
    batch_size: int = 25,
) -> tuple[list[dict], dict]:
    """Per-image metric records plus the mean summary.

    ``G=None`` with ``baseline='meanfill'`` scores the mean-fill baseline.
    """
    preds = []
    for i in range(0, len(images), batch_size):
        sl = slice(i, i + batch_size)
        if G is None:
            if baseline != "meanfill":
                raise ValueError("need a generator or baseline='meanfill'")
            preds.append(np.stack([meanfill(im, m) for im, m in zip(images[sl], masks[sl])]))
        else:
            preds.append(inpaint(G, images[sl], masks[sl]))
    preds = np.concatenate(preds)
    records = []
    for i, (p, t, m) in enumerate(zip(preds, images, masks)):
        rep = evaluate_pair(p, t, m)
        rec = {"index": i}
        for region, r in rep.items():
            for k in ("l1", "l2", "psnr_db", "ssim"):
                rec[f"{region}_{k}"] = getattr(r, k)
        records.append(rec)
    keys = list(dict.fromkeys(k for r in records for k in r if k != "index"))
    summary = {}
    for k in keys:
        vals = np.array([r.get(k, np.nan) for r in records], dtype=np.float64)
        # hole SSIM is NaN when no full window centre lies in the hole
        summary[k] = float(np.nanmean(vals)) if np.isfinite(vals).any() else float("nan")
    summary["n"] = len(records)
    return records, summary
