"""Hole masks, a procedural toy dataset, and PNG/PPM image I/O.

Masks use the certainty convention: 1 = known pixel, 0 = pixel to inpaint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class FreeFormParams:
    """Brush-stroke parameters, given for a 256x256 canvas and scaled linearly."""

    strokes: tuple = (1, 8)
    vertices: tuple = (4, 12)
    max_turn_deg: float = 40.0
    width: tuple = (3.0, 18.0)
    max_length_frac: float = 0.25
    reference_size: int = 256

    def __post_init__(self):
        for name in ("strokes", "vertices", "width"):
            lo, hi = getattr(self, name)
            if lo > hi or hi < 0:
                raise ValueError(f"{name} range {lo, hi} is empty")
        if self.max_length_frac <= 0 or self.max_turn_deg < 0:
            raise ValueError("stroke length and turn bound must be positive")


def hole_ratio(mask: np.ndarray) -> float:
    return float(1.0 - np.mean(mask))


def rasterize_stroke(shape: tuple, points: np.ndarray, width: float) -> np.ndarray:
    """Boolean map of pixels whose centre lies within width/2 of the polyline.

    Round caps and joints fall out of the distance test.  ``points`` are
    (row, col) pairs, so transposing the canvas and swapping the coordinates
    gives exactly the transposed raster.
    """
    h, w = shape
    out = np.zeros((h, w), dtype=bool)
    r = width / 2.0
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 1:
        points = np.vstack([points, points])
    for a, b in zip(points[:-1], points[1:]):
        lo = np.floor(np.minimum(a, b) - r).astype(int)
        hi = np.ceil(np.maximum(a, b) + r).astype(int)
        r0, c0 = max(lo[0], 0), max(lo[1], 0)
        r1, c1 = min(hi[0] + 1, h), min(hi[1] + 1, w)
        if r0 >= r1 or c0 >= c1:
            continue
        rows, cols = np.mgrid[r0:r1, c0:c1]
        d = b - a
        len2 = float(d @ d)
        pr, pc = rows - a[0], cols - a[1]
        if len2 > 0:
            t = np.clip((pr * d[0] + pc * d[1]) / len2, 0.0, 1.0)
        else:
            t = np.zeros_like(pr, dtype=np.float64)
        dist2 = (pr - t * d[0]) ** 2 + (pc - t * d[1]) ** 2
        out[r0:r1, c0:c1] |= dist2 <= r * r
    return out


def gen_freeform_mask(h: int, w: int, params: FreeFormParams | None = None, rng=None) -> np.ndarray:
    """Random-walk brush strokes; returns a float32 [1,H,W] mask."""
    params = params or FreeFormParams()
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    scale = min(h, w) / params.reference_size
    hole = np.zeros((h, w), dtype=bool)
    n_strokes = int(rng.integers(params.strokes[0], params.strokes[1] + 1))
    max_turn = math.radians(params.max_turn_deg)
    max_len = params.max_length_frac * min(h, w)
    for _ in range(n_strokes):
        n_vertex = int(rng.integers(params.vertices[0], params.vertices[1] + 1))
        width = rng.uniform(params.width[0], params.width[1]) * scale
        p = np.array([rng.uniform(0, h), rng.uniform(0, w)])
        heading = rng.uniform(0, 2 * math.pi)
        pts = [p.copy()]
        for _ in range(n_vertex - 1):
            heading += rng.uniform(-max_turn, max_turn)
            length = rng.uniform(0.2, 1.0) * max_len
            p = p + length * np.array([math.sin(heading), math.cos(heading)])
            p = np.clip(p, 0, [h - 1, w - 1])
            pts.append(p.copy())
        hole |= rasterize_stroke((h, w), np.array(pts), width)
    return (~hole).astype(np.float32)[None]


def gen_center_mask(h: int, w: int, frac: float = 0.5) -> np.ndarray:
    """Centred square hole of side round(frac * min(h, w))."""
    if not 0 < frac <= 1:
        raise ValueError("frac must be in (0, 1]")
    side = int(round(frac * min(h, w)))
    mask = np.ones((1, h, w), dtype=np.float32)
    top, left = (h - side) // 2, (w - side) // 2
    mask[:, top : top + side, left : left + side] = 0.0
    return mask


# ---------------------------------------------------------------------------
# procedural dataset
# ---------------------------------------------------------------------------


def synth_image(size: int, rng: np.random.Generator) -> np.ndarray:
    """One procedural image in [-1, 1], shape [3, size, size].

    Layers, back to front:
      * a linear two-colour gradient along a random direction,
      * an axis-aligned rectangle,
      * an ellipse whose colour is the rectangle colour negated (correlated).

    Every colour is drawn uniformly from [-1, 1]^3 and every layout draw is
    symmetric, so each pixel has expectation 0.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy = (yy + 0.5) / size
    xx = (xx + 0.5) / size
    c_a, c_b = rng.uniform(-1, 1, (2, 3))
    theta = rng.uniform(0, 2 * math.pi)
    proj = (xx - 0.5) * math.cos(theta) + (yy - 0.5) * math.sin(theta)
    t = np.clip(proj / math.sqrt(0.5) + 0.5, 0.0, 1.0)
    img = c_a[:, None, None] * (1 - t) + c_b[:, None, None] * t

    rect_color = rng.uniform(-1, 1, 3)
    cy, cx = rng.uniform(0.2, 0.8, 2)
    hh, hw = rng.uniform(0.08, 0.25, 2)
    inside = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
    img = np.where(inside[None], rect_color[:, None, None], img)

    ell_color = -rect_color
    ey, ex = rng.uniform(0.2, 0.8, 2)
    ay, ax = rng.uniform(0.08, 0.22, 2)
    inside = ((yy - ey) / ay) ** 2 + ((xx - ex) / ax) ** 2 <= 1.0
    img = np.where(inside[None], ell_color[:, None, None], img)
    return img.astype(np.float32)


SYNTH_MEAN = 0.0  # every pixel of synth_image has expectation 0 (see docstring)


def synth_dataset(n: int, size: int, rng=None) -> np.ndarray:
    if size < 1 or size & (size - 1):
        raise ValueError(f"size {size} is not a power of two")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return np.stack([synth_image(size, rng) for _ in range(n)]).astype(np.float32)


# ---------------------------------------------------------------------------
# image files
# ---------------------------------------------------------------------------


class ImageFormatError(ValueError):
    """Unreadable, truncated or unsupported image file."""


def _to_uint8(t: np.ndarray) -> np.ndarray:
    t = np.clip(np.asarray(t, dtype=np.float64), -1.0, 1.0)
    return np.round((t + 1.0) * 127.5).astype(np.uint8)


def _from_uint8(a: np.ndarray) -> np.ndarray:
    return (a.astype(np.float32) / 127.5 - 1.0).astype(np.float32)


def _read_ppm(data: bytes) -> np.ndarray:
    tokens = []
    pos = 0
    # header: magic, width, height, maxval separated by whitespace/comments
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise ImageFormatError(f"unsupported PPM magic {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError("malformed PPM header") from exc
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit PPM is supported (maxval {maxval})")
    pos += 1  # single whitespace after maxval
    need = w * h * 3
    body = data[pos : pos + need]
    if len(body) != need:
        raise ImageFormatError(f"truncated PPM: expected {need} bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


def load_image(path) -> np.ndarray:
    """Read an 8-bit PNG or binary PPM (P6) as float32 [C,H,W] in [-1, 1]."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ImageFormatError(f"cannot read {path}: {exc}") from exc
    if data[:2] == b"P6":
        arr = _read_ppm(data)
    elif data[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        try:
            with Image.open(path) as im:
                im.load()
                if im.mode in ("I;16", "I", "F") or im.mode.startswith("I;16"):
                    raise ImageFormatError(f"unsupported bit depth (mode {im.mode})")
                arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
        except ImageFormatError:
            raise
        except Exception as exc:
            raise ImageFormatError(f"cannot decode {path}: {exc}") from exc
    else:
        raise ImageFormatError(f"{path} is neither PNG nor P6 PPM")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return _from_uint8(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def save_image(t: np.ndarray, path) -> None:
    """Write [C,H,W] values in [-1, 1]; format chosen by suffix (.png or .ppm)."""
    path = Path(path)
    a = _to_uint8(t)
    if a.ndim != 3 or a.shape[0] not in (1, 3):
        raise ValueError(f"expected [1|3,H,W] image, got {a.shape}")
    hwc = np.ascontiguousarray(a.transpose(1, 2, 0))
    if path.suffix.lower() == ".ppm":
        if hwc.shape[2] == 1:
            hwc = np.repeat(hwc, 3, axis=2)
        h, w, _ = hwc.shape
        path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + hwc.tobytes())
        return
    from PIL import Image

    img = Image.fromarray(hwc[:, :, 0] if hwc.shape[2] == 1 else hwc)
    img.save(path, format="PNG")


def save_mask(mask: np.ndarray, path) -> None:
    """Grayscale PNG with 255 = known, 0 = hole."""
    from PIL import Image

    m = np.asarray(mask).reshape(mask.shape[-2:])
    Image.fromarray((m > 0.5).astype(np.uint8) * 255).save(Path(path), format="PNG")


def load_mask(path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except Exception as exc:
        raise ImageFormatError(f"cannot read mask {path}: {exc}") from exc
    return (arr > 127).astype(np.float32)[None]
