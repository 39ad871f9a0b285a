"""Seeded preprocessing and augmentation for (3, H, W) float32 images.

Randomness never comes from a shared mutable generator.  Every random
transform gets its own :class:`RngStream` keyed by
``(global_seed, epoch, sample_id, transform_index)``, so results do not depend
on batch composition or on the order in which samples are processed.

Resizing uses the half-pixel-center convention::

    src = (dst + 0.5) * (src_extent / dst_extent) - 0.5     (clamped)

This is the detail that matters when porting pipelines between frameworks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Union

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

LUMA = (0.299, 0.587, 0.114)


def splitmix64(x: int) -> int:
    """One SplitMix64 step: advance by the golden gamma and avalanche."""
    x = (x + GOLDEN_GAMMA) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_seed(*fields: int) -> int:
    """Fold integer fields into one 64-bit seed, one mixing round per field."""
    h = 0
    for f in fields:
        h = splitmix64(h ^ (int(f) & MASK64))
    return h


class RngStream:
    """SplitMix64 generator with a 64-bit state."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    @classmethod
    def for_sample(cls, global_seed: int, epoch: int, sample_id: int, transform_index: int) -> "RngStream":
        return cls(derive_seed(global_seed, epoch, sample_id, transform_index))

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        """Uniform draw in [low, high) from the top 53 bits."""
        u = (self.next_u64() >> 11) * (1.0 / (1 << 53))
        return low + (high - low) * u

    def below(self, n: int) -> int:
        """Integer in [0, n)."""
        return int(self.uniform() * n)

    def shuffle(self, items: list) -> list:
        """Fisher-Yates shuffle returning a new list."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.below(i + 1)
            out[i], out[j] = out[j], out[i]
        return out


# ---------------------------------------------------------------------------
# geometric ops
# ---------------------------------------------------------------------------


def _axis_coords(dst: int, src: int):
    scale = src / dst
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * scale - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, src - 1)
    return i0, i1, pos - i0


def resize_bilinear(img: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resize of a (C, H, W) image with half-pixel centers."""
    if target_h < 1 or target_w < 1:
        raise ValueError(f"resize target must be >= 1, got {target_h}x{target_w}")
    c, h, w = img.shape
    if (h, w) == (target_h, target_w):
        return img.copy()
    y0, y1, fy = _axis_coords(target_h, h)
    x0, x1, fx = _axis_coords(target_w, w)
    src = img.astype(np.float64)
    fy = fy[None, :, None]
    fx = fx[None, None, :]
    top = src[:, y0][:, :, x0] * (1 - fx) + src[:, y0][:, :, x1] * fx
    bot = src[:, y1][:, :, x0] * (1 - fx) + src[:, y1][:, :, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    """Square crop with top-left offset floor((H - size) / 2), floor((W - size) / 2)."""
    _, h, w = img.shape
    if size < 1 or size > min(h, w):
        raise ValueError(f"crop size {size} does not fit a {h}x{w} image")
    top, left = (h - size) // 2, (w - size) // 2
    return img[:, top : top + size, left : left + size].copy()


def flip_h(img: np.ndarray) -> np.ndarray:
    return img[:, :, ::-1].copy()


def flip_v(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1, :].copy()


def random_flip_h(img: np.ndarray, p: float, rng: RngStream) -> np.ndarray:
    return flip_h(img) if rng.uniform() < p else img


def random_flip_v(img: np.ndarray, p: float, rng: RngStream) -> np.ndarray:
    return flip_v(img) if rng.uniform() < p else img


def _snap(v: float) -> float:
    r = round(v)
    return float(r) if abs(v - r) < 1e-12 else v


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about ((W-1)/2, (H-1)/2) by inverse-mapped bilinear sampling.

    Samples outside the image read as 0.0.  Multiples of 90 degrees map onto
    the pixel grid exactly.
    """
    c, h, w = img.shape
    theta = math.radians(degrees)
    cos_t, sin_t = _snap(math.cos(theta)), _snap(math.sin(theta))
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64) - cy, np.arange(w, dtype=np.float64) - cx, indexing="ij")
    # inverse map: rotate output coordinates by -theta
    sx = cos_t * xx + sin_t * yy + cx
    sy = -sin_t * xx + cos_t * yy + cy
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    fx = sx - x0
    fy = sy - y0
    padded = np.zeros((c, h + 2, w + 2), dtype=np.float64)
    padded[:, 1:-1, 1:-1] = img
    # shift into padded coordinates; anything further out reads the zero border
    xa = np.clip(x0 + 1, 0, w + 1)
    xb = np.clip(x0 + 2, 0, w + 1)
    ya = np.clip(y0 + 1, 0, h + 1)
    yb = np.clip(y0 + 2, 0, h + 1)
    out = (
        padded[:, ya, xa] * ((1 - fy) * (1 - fx))
        + padded[:, ya, xb] * ((1 - fy) * fx)
        + padded[:, yb, xa] * (fy * (1 - fx))
        + padded[:, yb, xb] * (fy * fx)
    )
    return out.astype(np.float32)


def random_rotation(img: np.ndarray, max_deg: float, rng: RngStream) -> np.ndarray:
    if not 0 <= max_deg <= 180:
        raise ValueError(f"max_deg must be in [0, 180], got {max_deg}")
    return rotate(img, rng.uniform(-max_deg, max_deg))


# ---------------------------------------------------------------------------
# photometric ops
# ---------------------------------------------------------------------------


def luma(img: np.ndarray) -> np.ndarray:
    return LUMA[0] * img[0] + LUMA[1] * img[1] + LUMA[2] * img[2]


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img
    maxc = np.max(img, axis=0)
    minc = np.min(img, axis=0)
    delta = maxc - minc
    v = maxc
    s = np.divide(delta, maxc, out=np.zeros_like(maxc), where=maxc > 0)
    safe = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v])


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.intp) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def adjust(img: np.ndarray, brightness: float = 1.0, contrast: float = 1.0, saturation: float = 1.0, hue: float = 0.0) -> np.ndarray:
    """Apply brightness, contrast, saturation, hue in that order.

    Each stage clamps to [0, 1].  Identity factors skip their stage, which
    keeps the identity case bit-exact.
    """
    x = img.astype(np.float64)
    if brightness != 1.0:
        x = np.clip(x * brightness, 0.0, 1.0)
    if contrast != 1.0:
        mean_luma = luma(x).mean()
        x = np.clip(mean_luma + contrast * (x - mean_luma), 0.0, 1.0)
    if saturation != 1.0:
        gray = luma(x)[None]
        x = np.clip(gray + saturation * (x - gray), 0.0, 1.0)
    if hue != 0.0:
        hsv = rgb_to_hsv(x)
        hsv[0] = (hsv[0] + hue) % 1.0
        x = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
    return x.astype(np.float32)


def color_jitter(
    img: np.ndarray,
    b_range: Sequence[float],
    c_range: Sequence[float],
    s_range: Sequence[float],
    h_range: Sequence[float],
    rng: RngStream,
) -> np.ndarray:
    """Draw the four factors (in order b, c, s, h) uniformly and apply them."""
    for name, (lo, hi) in (("brightness", b_range), ("contrast", c_range), ("saturation", s_range)):
        if lo <= 0 or hi < lo:
            raise ValueError(f"{name} range must be positive and ordered, got ({lo}, {hi})")
    if not (-0.5 <= h_range[0] <= h_range[1] <= 0.5):
        raise ValueError(f"hue range must lie in [-0.5, 0.5], got {tuple(h_range)}")
    fb = rng.uniform(*b_range)
    fc = rng.uniform(*c_range)
    fs = rng.uniform(*s_range)
    fh = rng.uniform(*h_range)
    return adjust(img, fb, fc, fs, fh)


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Resize:
    target: int
    random = False

    def __call__(self, img, rng=None):
        return resize_bilinear(img, self.target, self.target)


@dataclass(frozen=True)
class CenterCrop:
    size: int
    random = False

    def __call__(self, img, rng=None):
        return center_crop(img, self.size)


@dataclass(frozen=True)
class RandomHFlip:
    p: float = 0.5
    random = True

    def __call__(self, img, rng):
        return random_flip_h(img, self.p, rng)


@dataclass(frozen=True)
class RandomVFlip:
    p: float = 0.5
    random = True

    def __call__(self, img, rng):
        return random_flip_v(img, self.p, rng)


@dataclass(frozen=True)
class RandomRotation:
    max_deg: float = 180.0
    random = True

    def __call__(self, img, rng):
        return random_rotation(img, self.max_deg, rng)


@dataclass(frozen=True)
class ColorJitter:
    brightness: tuple = (0.8, 1.2)
    contrast: tuple = (0.8, 1.2)
    saturation: tuple = (0.8, 1.2)
    hue: tuple = (-0.05, 0.05)
    random = True

    def __call__(self, img, rng):
        return color_jitter(img, self.brightness, self.contrast, self.saturation, self.hue, rng)


Transform = Union[Resize, CenterCrop, RandomHFlip, RandomVFlip, RandomRotation, ColorJitter]
TRANSFORMS = {cls.__name__: cls for cls in (Resize, CenterCrop, RandomHFlip, RandomVFlip, RandomRotation, ColorJitter)}


@dataclass(frozen=True)
class AugmentPipeline:
    """Ordered transforms plus a mode; eval mode skips every random step."""

    transforms: tuple
    mode: str = "train"
    resolution: Optional[int] = None

    def __post_init__(self):
        if self.mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {self.mode!r}")
        object.__setattr__(self, "transforms", tuple(self.transforms))

    def eval(self) -> "AugmentPipeline":
        return AugmentPipeline(self.transforms, "eval", self.resolution)

    def train(self) -> "AugmentPipeline":
        return AugmentPipeline(self.transforms, "train", self.resolution)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "resolution": self.resolution,
            "transforms": [{"type": type(t).__name__, **_jsonable(asdict(t))} for t in self.transforms],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentPipeline":
        ts = []
        for spec in d["transforms"]:
            spec = dict(spec)
            kind = spec.pop("type")
            if kind not in TRANSFORMS:
                raise ValueError(f"unknown transform {kind!r}")
            if kind == "ColorJitter":
                spec = {k: tuple(v) for k, v in spec.items()}
            ts.append(TRANSFORMS[kind](**spec))
        return cls(tuple(ts), d.get("mode", "train"), d.get("resolution"))


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def apply_pipeline(pipeline: AugmentPipeline, img: np.ndarray, global_seed: int, epoch: int, sample_id: int) -> np.ndarray:
    """Run ``pipeline`` on one image.

    Transform ``k`` (its position in the configured list) draws from the
    stream keyed by ``(global_seed, epoch, sample_id, k)``.
    """
    out = np.asarray(img, dtype=np.float32)
    if out.ndim != 3 or out.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {out.shape}")
    for k, t in enumerate(pipeline.transforms):
        if t.random:
            if pipeline.mode == "eval":
                continue
            out = t(out, RngStream.for_sample(global_seed, epoch, sample_id, k))
        else:
            out = t(out)
    if pipeline.resolution is not None and out.shape[1:] != (pipeline.resolution, pipeline.resolution):
        raise ValueError(f"pipeline produced {out.shape[1:]}, expected {pipeline.resolution}x{pipeline.resolution}")
    return out


def crop_resize_target(resolution: int) -> int:
    """Pre-crop resize extent keeping the 470:384 ratio, e.g. 64 -> 78."""
    return int(math.floor(resolution * 470 / 384 + 0.5))


@dataclass(frozen=True)
class AugmentOptions:
    """Which random steps a training pipeline includes, and their parameters."""

    rotation: bool = True
    flip: bool = True
    jitter: bool = True
    max_deg: float = 180.0
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    brightness: tuple = (0.8, 1.2)
    contrast: tuple = (0.8, 1.2)
    saturation: tuple = (0.8, 1.2)
    hue: tuple = (-0.05, 0.05)


NO_AUGMENT = AugmentOptions(rotation=False, flip=False, jitter=False)


def preset(name: str, resolution: int, options: AugmentOptions = AugmentOptions(), mode: str = "train") -> AugmentPipeline:
    """Ensemble member input pipelines.

    ``A`` resizes straight to the working resolution.  ``B`` and ``C`` resize
    to ``round(R * 470 / 384)`` and center-crop back to ``R``.  Random steps
    follow in the order flips, rotation, color jitter.
    """
    if name == "A":
        ts: list = [Resize(resolution)]
    elif name in ("B", "C"):
        ts = [Resize(crop_resize_target(resolution)), CenterCrop(resolution)]
    else:
        raise ValueError(f"unknown pipeline preset {name!r}; expected A, B or C")
    if options.flip:
        ts += [RandomHFlip(options.hflip_p), RandomVFlip(options.vflip_p)]
    if options.rotation:
        ts.append(RandomRotation(options.max_deg))
    if options.jitter:
        ts.append(ColorJitter(tuple(options.brightness), tuple(options.contrast), tuple(options.saturation), tuple(options.hue)))
    return AugmentPipeline(tuple(ts), mode, resolution)
