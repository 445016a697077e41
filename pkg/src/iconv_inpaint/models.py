"""Multi-scale U-Net generator with imputed convolutions, and a residual critic."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .layers import IConvLayer, SkipFusion, certainty_weighted_avg_pool
from .nn import EqualizedConv2d, EqualizedLinear, MLP, Module, parameter
from .tensor import (
    ShapeError,
    Tensor,
    avg_pool2x,
    concat,
    conv2d,
    leaky_relu,
    pixel_norm,
    upsample2x,
)

POSE_BANK_CHANNELS = 32
POSE_MAP_RESOLUTION = 32


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class NetworkConfig:
    base_resolution: int = 4
    max_resolution: int = 32
    channels: dict = field(default_factory=lambda: {4: 128, 8: 128, 16: 64, 32: 64})
    latent_dim: int = 32
    use_pose: bool = False
    num_keypoints: int = 7
    image_channels: int = 3
    conv_type: str = "iconv"  # "iconv" or "plain"
    estimator_size: int = 5
    shared_estimator: bool = False
    mask_conditioning: bool = True
    pose_hidden_generator: int = 128
    pose_hidden_discriminator: int = 64
    dtype: str = "float32"

    def __post_init__(self):
        self.channels = {int(k): int(v) for k, v in self.channels.items()}
        self.validate()

    @property
    def resolutions(self) -> list[int]:
        out, r = [], self.base_resolution
        while r <= self.max_resolution:
            out.append(r)
            r *= 2
        return out

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def validate(self) -> None:
        for r in (self.base_resolution, self.max_resolution):
            if not _is_pow2(r):
                raise ValueError(f"resolution {r} is not a power of two")
        if self.max_resolution < self.base_resolution:
            raise ValueError("max_resolution is below base_resolution")
        missing = [r for r in self.resolutions if r not in self.channels]
        if missing:
            raise ValueError(f"no channel width for resolutions {missing}")
        widths = [self.channels[r] for r in self.resolutions]
        if any(b > a for a, b in zip(widths, widths[1:])):
            raise ValueError("channel widths must not grow with resolution")
        if self.conv_type not in ("iconv", "plain"):
            raise ValueError(f"unknown conv_type {self.conv_type!r}")
        if self.use_pose and self.max_resolution < POSE_MAP_RESOLUTION:
            raise ValueError("pose conditioning needs a 32x32 critic stage")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = {str(k): v for k, v in self.channels.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


class PlainConvLayer(Module):
    """Baseline twin of IConvLayer: same feature filter, no imputation."""

    def __init__(self, c_in, c_out, k=3, rng=None, alpha=0.2, use_pixel_norm=True, dtype=np.float32, **_):
        rng = rng if rng is not None else np.random.default_rng()
        self.weight = parameter(rng.standard_normal((c_out, c_in, k, k)).astype(dtype))
        self.bias = parameter(np.zeros(c_out, dtype=dtype))
        self.scale = math.sqrt(2.0) / math.sqrt(c_in * k * k)
        self.k = k
        self.alpha = alpha
        self.use_pixel_norm = use_pixel_norm

    def __call__(self, x: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        y = conv2d(x, self.weight * self.scale, self.bias, 1, (self.k - 1) // 2)
        y = leaky_relu(y, self.alpha)
        return (pixel_norm(y) if self.use_pixel_norm else y), c


class PoseBank(Module):
    """Two fully connected layers turning keypoints into a spatial feature map."""

    def __init__(self, num_keypoints: int, hidden: int, out_shape: tuple, rng, dtype=np.float32):
        self.num_keypoints = num_keypoints
        self.out_shape = tuple(out_shape)
        self.mlp = MLP(num_keypoints * 2, hidden, int(np.prod(out_shape)), rng, dtype=dtype)

    def __call__(self, pose: Tensor) -> Tensor:
        if pose.ndim != 2 or pose.shape[1] != self.num_keypoints * 2:
            raise ShapeError(f"expected pose [N,{self.num_keypoints * 2}], got {pose.shape}")
        return self.mlp(pose).reshape((pose.shape[0],) + self.out_shape)


def pose_preprocess(model: "Generator | Discriminator", pose: Tensor) -> Tensor:
    if model.pose is None:
        raise ValueError("model was built without pose conditioning")
    return model.pose(pose)


class Generator(Module):
    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        self.cfg = cfg
        dt = cfg.np_dtype
        res = cfg.resolutions
        ch = cfg.channels
        layer_cls = IConvLayer if cfg.conv_type == "iconv" else PlainConvLayer
        kw = dict(
            rng=rng,
            estimator_size=cfg.estimator_size,
            shared_estimator=cfg.shared_estimator,
            dtype=dt,
        )

        self.encoder = []
        c_prev = cfg.image_channels
        for r in reversed(res):
            self.encoder.append(_Stage(layer_cls(c_prev, ch[r], 3, **kw), layer_cls(ch[r], ch[r], 3, **kw)))
            c_prev = ch[r]

        extra = cfg.latent_dim + (POSE_BANK_CHANNELS if cfg.use_pose else 0)
        base = cfg.base_resolution
        self.decoder = [
            _Stage(layer_cls(ch[base] + extra, ch[base], 3, **kw), layer_cls(ch[base], ch[base], 3, **kw))
        ]
        self.fusions = []
        for r in res[1:]:
            self.decoder.append(_Stage(layer_cls(ch[r // 2], ch[r], 3, **kw), layer_cls(ch[r], ch[r], 3, **kw)))
            self.fusions.append(SkipFusion(dtype=dt))
        self.to_rgb = [EqualizedConv2d(ch[r], cfg.image_channels, 1, rng, gain=1.0, dtype=dt) for r in res]
        self.pose = (
            PoseBank(cfg.num_keypoints, cfg.pose_hidden_generator, (POSE_BANK_CHANNELS, base, base), rng, dt)
            if cfg.use_pose
            else None
        )

    def __call__(self, image, mask, z, pose=None, return_parts: bool = False):
        return generator_forward(self, image, mask, z, pose, return_parts)


class _Stage(Module):
    def __init__(self, first, second):
        self.conv1 = first
        self.conv2 = second

    def __call__(self, x, c):
        x, c = self.conv1(x, c)
        return self.conv2(x, c)


def build_generator(cfg: NetworkConfig, rng: np.random.Generator | int) -> Generator:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return Generator(cfg, rng)


def _fuse_plain(fusion: SkipFusion, x_shallow: Tensor, x_deep: Tensor) -> Tensor:
    b1, b2 = fusion.log_w_shallow.exp(), fusion.log_w_deep.exp()
    g = b1 / (b1 + b2)
    return x_shallow * g.reshape(1, 1, 1, 1) + x_deep * (1.0 - g).reshape(1, 1, 1, 1)


def generator_forward(
    G: Generator,
    image: Tensor,
    mask: Tensor,
    z: Tensor,
    pose: Optional[Tensor] = None,
    return_parts: bool = False,
):
    """Raw generator output in [-1, 1] (before compositing with known pixels).

    ``image`` [N,3,R,R]; ``mask`` [N,1,R,R] binary certainty (0 = hole);
    ``z`` [N, latent_dim].
    """
    cfg = G.cfg
    n = image.shape[0]
    R = cfg.max_resolution
    if image.shape[1:] != (cfg.image_channels, R, R):
        raise ShapeError(f"expected image [N,{cfg.image_channels},{R},{R}], got {image.shape}")
    if mask.shape != (n, 1, R, R):
        raise ShapeError(f"expected certainty [N,1,{R},{R}], got {mask.shape}")
    if z.shape != (n, cfg.latent_dim):
        raise ShapeError(f"expected latent [N,{cfg.latent_dim}], got {z.shape}")
    if cfg.use_pose and pose is None:
        raise ValueError("this generator needs pose keypoints")
    plain = cfg.conv_type == "plain"

    x = image * mask  # hole pixels zero-filled
    c = mask
    skips = []
    for i, stage in enumerate(G.encoder):
        x, c = stage(x, c)
        if i < len(G.encoder) - 1:
            skips.append((x, c))
            x, c = (avg_pool2x(x), avg_pool2x(c)) if plain else certainty_weighted_avg_pool(x, c)

    base = cfg.base_resolution
    extras = [z.reshape(n, cfg.latent_dim, 1, 1).broadcast_to((n, cfg.latent_dim, base, base))]
    if cfg.use_pose:
        extras.append(pose_preprocess(G, pose))
    x = concat([x] + extras, axis=1)

    rgb = None
    shallow_shares = []
    for i, stage in enumerate(G.decoder):
        if i > 0:
            x, c = upsample2x(x), upsample2x(c)
            x, c = stage.conv1(x, c)
            xs, cs = skips[-i]
            fusion = G.fusions[i - 1]
            if plain:
                x = _fuse_plain(fusion, xs, x)
            else:
                shallow_shares.append(fusion.shallow_share(cs, c))
                x, c = fusion(xs, cs, x, c)
            x, c = stage.conv2(x, c)
        else:
            x, c = stage(x, c)
        y = G.to_rgb[i](x)
        rgb = y if rgb is None else upsample2x(rgb) + y
    out = rgb.tanh()
    if return_parts:
        return out, {"certainty": c, "shallow_shares": shallow_shares}
    return out


def composite_output(raw: Tensor, image: Tensor, mask: Tensor) -> Tensor:
    """Keep known pixels from ``image``; take hole pixels from ``raw``.

    With a binary ``mask`` both products are exact, so known pixels come out
    bit-identical to the input.
    """
    if raw.shape != image.shape:
        raise ShapeError(f"raw {raw.shape} and image {image.shape} differ")
    return raw * (1.0 - mask) + image * mask


class ResidualBlock(Module):
    """(conv3x3, LeakyReLU) x2 then 2x average pool, plus a linear 1x1 shortcut."""

    def __init__(self, c_in: int, c_out: int, rng, dtype=np.float32):
        self.conv1 = EqualizedConv2d(c_in, c_in, 3, rng, dtype=dtype)
        self.conv2 = EqualizedConv2d(c_in, c_out, 3, rng, dtype=dtype)
        self.shortcut = EqualizedConv2d(c_in, c_out, 1, rng, bias=False, gain=1.0, dtype=dtype)

    def residual(self, x: Tensor) -> Tensor:
        y = leaky_relu(self.conv1(x), 0.2)
        y = leaky_relu(self.conv2(y), 0.2)
        return avg_pool2x(y)

    def skip(self, x: Tensor) -> Tensor:
        return self.shortcut(avg_pool2x(x))

    def __call__(self, x: Tensor) -> Tensor:
        return (self.residual(x) + self.skip(x)) * (1.0 / math.sqrt(2.0))


class Discriminator(Module):
    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        self.cfg = cfg
        dt = cfg.np_dtype
        res = cfg.resolutions
        ch = cfg.channels
        R = cfg.max_resolution
        c_in = cfg.image_channels + (1 if cfg.mask_conditioning else 0)
        self.from_rgb = EqualizedConv2d(c_in, ch[R], 1, rng, dtype=dt)
        self.blocks = []
        for r in reversed(res[1:]):
            extra = 1 if (cfg.use_pose and r == POSE_MAP_RESOLUTION) else 0
            self.blocks.append(ResidualBlock(ch[r] + extra, ch[r // 2], rng, dtype=dt))
        base = cfg.base_resolution
        c_base = ch[base]
        self.final_conv = EqualizedConv2d(c_base, c_base, 3, rng, dtype=dt)
        self.fc = EqualizedLinear(c_base * base * base, c_base, rng, dtype=dt)
        self.out = EqualizedLinear(c_base, 1, rng, gain=1.0, dtype=dt)
        self.pose = (
            PoseBank(
                cfg.num_keypoints,
                cfg.pose_hidden_discriminator,
                (1, POSE_MAP_RESOLUTION, POSE_MAP_RESOLUTION),
                rng,
                dt,
            )
            if cfg.use_pose
            else None
        )

    def __call__(self, image: Tensor, mask: Optional[Tensor] = None, pose: Optional[Tensor] = None) -> Tensor:
        return discriminator_forward(self, image, mask, pose)


def build_discriminator(cfg: NetworkConfig, rng: np.random.Generator | int) -> Discriminator:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return Discriminator(cfg, rng)


def discriminator_forward(
    D: Discriminator,
    image: Tensor,
    mask: Optional[Tensor] = None,
    pose: Optional[Tensor] = None,
) -> Tensor:
    """One critic score per sample, shape [N]."""
    cfg = D.cfg
    R = cfg.max_resolution
    n = image.shape[0]
    if image.shape[1:] != (cfg.image_channels, R, R):
        raise ShapeError(f"expected image [N,{cfg.image_channels},{R},{R}], got {image.shape}")
    x = image
    if cfg.mask_conditioning:
        if mask is None or mask.shape != (n, 1, R, R):
            raise ShapeError("critic is mask-conditioned and needs a [N,1,R,R] mask")
        x = concat([x, mask], axis=1)
    if cfg.use_pose and pose is None:
        raise ValueError("this critic needs pose keypoints")
    x = leaky_relu(D.from_rgb(x), 0.2)
    r = R
    for block in D.blocks:
        if cfg.use_pose and r == POSE_MAP_RESOLUTION:
            x = concat([x, pose_preprocess(D, pose)], axis=1)
        x = block(x)
        r //= 2
    x = leaky_relu(D.final_conv(x), 0.2)
    x = leaky_relu(D.fc(x.reshape(n, -1)), 0.2)
    return D.out(x).reshape(n)


_CATEGORY = {"est_kernel": "estimator_params", "cert_weight": "certainty_params"}


def count_parameters(model: Module) -> dict:
    """Exact parameter counts split by role.

    ``overhead_ratio`` is the share of parameters spent on certainty handling
    (certainty filters, estimator kernels, skip-fusion weights).
    """
    out = {"feature_params": 0, "certainty_params": 0, "estimator_params": 0, "fusion_params": 0}
    for name, p in model.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in _CATEGORY:
            out[_CATEGORY[leaf]] += p.size
        elif leaf.startswith("log_w_"):
            out["fusion_params"] += p.size
        else:
            out["feature_params"] += p.size
    total = sum(out.values())
    out["total"] = total
    overhead = out["certainty_params"] + out["estimator_params"] + out["fusion_params"]
    out["overhead_ratio"] = overhead / total if total else 0.0
    return out
