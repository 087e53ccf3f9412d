"""Synthetic anomaly generation: misplaced, blurry, crack and noise defects.

Every generator returns the edited image together with a pixel-exact mask. The
mask is defined by geometry (the region the generator was allowed to touch), so
any pixel that differs from the input is inside it, but a masked pixel may be
unchanged (e.g. pasting identical content).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import ConfigError, SizingError
from .kernels import raster_polyline

BASE_TYPES = ("misplaced", "blurry", "crack", "noise")
ANOMALY_TYPES = BASE_TYPES + ("combined",)
NOISE_KINDS = ("uniform", "gaussian", "positive")

# below this sigma the Gaussian kernel collapses to the identity
MIN_BLUR_SIGMA = 1e-3


def _check_range(name, rng_pair, lo=None, hi=None, open_lo=False, open_hi=False):
    a, b = rng_pair
    if a > b:
        raise ConfigError(f"{name}: empty range ({a}, {b})")
    if lo is not None and (a < lo or (open_lo and a == lo)):
        raise ConfigError(f"{name}: lower bound {a} out of domain")
    if hi is not None and (b > hi or (open_hi and b == hi)):
        raise ConfigError(f"{name}: upper bound {b} out of domain")


@dataclass(frozen=True)
class SynthConfig:
    anomaly_type: str = "mix"
    region_count: int = 1
    region_area_fraction: tuple[float, float] = (0.01, 0.06)
    aspect_ratio_range: tuple[float, float] = (0.5, 2.0)
    blur_sigma_range: tuple[float, float] = (1.5, 4.0)
    noise_kind: str | None = None  # None samples a kind per call
    noise_amplitude: tuple[float, float] = (0.1, 0.4)
    crack_segments: int = 4
    crack_thickness_px: tuple[int, int] = (1, 3)
    crack_darkening: tuple[float, float] = (0.3, 0.7)
    crack_branch_prob: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.anomaly_type not in ANOMALY_TYPES + ("mix",):
            raise ConfigError(f"anomaly_type must be one of {ANOMALY_TYPES + ('mix',)}, got {self.anomaly_type!r}")
        if self.region_count < 0:
            raise ConfigError("region_count must be >= 0")
        _check_range("region_area_fraction", self.region_area_fraction, 0.0, 1.0, open_lo=True, open_hi=True)
        _check_range("aspect_ratio_range", self.aspect_ratio_range, 0.0, open_lo=True)
        _check_range("blur_sigma_range", self.blur_sigma_range, 0.0, open_lo=True)
        if self.noise_kind is not None and self.noise_kind not in NOISE_KINDS:
            raise ConfigError(f"noise_kind must be one of {NOISE_KINDS} or null")
        _check_range("noise_amplitude", self.noise_amplitude, 0.0, 1.0)
        if self.crack_segments < 1:
            raise ConfigError("crack_segments must be >= 1")
        _check_range("crack_thickness_px", self.crack_thickness_px, 1)
        _check_range("crack_darkening", self.crack_darkening, 0.0, 1.0)
        if not 0.0 <= self.crack_branch_prob <= 1.0:
            raise ConfigError("crack_branch_prob must be in [0, 1]")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")


@dataclass
class SynthResult:
    image: np.ndarray
    mask: np.ndarray
    anomaly_type: str
    info: dict = field(default_factory=dict)


def _as_image(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {img.shape}")
    return img


def _max_patch(cfg: SynthConfig, height, width):
    area = cfg.region_area_fraction[1] * height * width
    max_h = math.sqrt(area * cfg.aspect_ratio_range[1])
    max_w = math.sqrt(area / cfg.aspect_ratio_range[0])
    return min(max(1, round(max_h)), height), min(max(1, round(max_w)), width)


def _check_size(img, cfg: SynthConfig):
    height, width = img.shape[:2]
    ph, pw = _max_patch(cfg, height, width)
    if height < 2 * ph or width < 2 * pw:
        raise SizingError(
            f"image {height}x{width} too small for patches up to {ph}x{pw} "
            f"(need at least twice the patch size)"
        )


def _sample_rect(rng, cfg: SynthConfig, height, width, foreground=None, tries=100):
    area = rng.uniform(*cfg.region_area_fraction) * height * width
    aspect = rng.uniform(*cfg.aspect_ratio_range)
    ph = min(max(1, round(math.sqrt(area * aspect))), height)
    pw = min(max(1, round(math.sqrt(area / aspect))), width)
    for _ in range(tries):
        top = int(rng.integers(0, height - ph + 1))
        left = int(rng.integers(0, width - pw + 1))
        if foreground is None or foreground[top + ph // 2, left + pw // 2]:
            break
    return top, left, ph, pw


def _rect_mask(shape, rect):
    mask = np.zeros(shape, dtype=bool)
    top, left, ph, pw = rect
    mask[top:top + ph, left:left + pw] = True
    return mask


def _overlaps(a, b):
    return not (a[0] + a[2] <= b[0] or b[0] + b[2] <= a[0] or a[1] + a[3] <= b[1] or b[1] + b[3] <= a[1])


def _sample_regions(rng, cfg, height, width, foreground):
    mask = np.zeros((height, width), dtype=bool)
    rects = []
    for _ in range(cfg.region_count):
        rect = _sample_rect(rng, cfg, height, width, foreground)
        rects.append(rect)
        mask |= _rect_mask((height, width), rect)
    return mask, rects


def synth_misplaced(img, cfg: SynthConfig, rng, foreground=None) -> SynthResult:
    """Cut rectangular patches and paste them at disjoint destinations."""
    img = _as_image(img)
    _check_size(img, cfg)
    height, width = img.shape[:2]
    out = img.copy()
    mask = np.zeros((height, width), dtype=bool)
    placed = []
    for _ in range(cfg.region_count):
        dst = None
        for _ in range(100):
            cand = _sample_rect(rng, cfg, height, width, foreground)
            if not any(_overlaps(cand, p) for p, _ in placed):
                dst = cand
                break
        if dst is None:
            continue
        _, _, ph, pw = dst
        src = (int(rng.integers(0, height - ph + 1)), int(rng.integers(0, width - pw + 1)), ph, pw)
        placed.append((dst, src))
    for (dt, dl, ph, pw), (st, sl, _, _) in placed:
        # read from the untouched input so paste order does not matter
        out[dt:dt + ph, dl:dl + pw] = img[st:st + ph, sl:sl + pw]
        mask[dt:dt + ph, dl:dl + pw] = True
    return SynthResult(out, mask, "misplaced", {"pastes": placed})


def apply_blur(img, region, sigma):
    """Replace ``region`` pixels with a Gaussian-blurred copy of the image."""
    sigma = max(float(sigma), MIN_BLUR_SIGMA)
    blurred = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect", truncate=4.0)
    out = img.copy()
    out[region] = blurred[region]
    return out


def synth_blurry(img, cfg: SynthConfig, rng, foreground=None) -> SynthResult:
    img = _as_image(img)
    _check_size(img, cfg)
    mask, rects = _sample_regions(rng, cfg, *img.shape[:2], foreground)
    sigma = rng.uniform(*cfg.blur_sigma_range)
    out = apply_blur(img, mask, sigma) if mask.any() else img.copy()
    return SynthResult(out, mask, "blurry", {"rects": rects, "sigma": sigma})


def _ray_extent(point, direction, height, width):
    """Largest t with point + t * direction inside [0, H-1] x [0, W-1]."""
    t = np.inf
    for p, d, hi in ((point[0], direction[0], height - 1), (point[1], direction[1], width - 1)):
        if d > 1e-12:
            t = min(t, (hi - p) / d)
        elif d < -1e-12:
            t = min(t, -p / d)
    return t


def _random_walk(rng, start, angle, steps, max_step, height, width):
    verts = [np.asarray(start, dtype=np.float64)]
    for _ in range(steps):
        angle += rng.normal(0.0, 0.5)
        length = rng.uniform(3.0, max(3.0, max_step))
        for flip in (0.0, math.pi):
            d = np.array([math.sin(angle + flip), math.cos(angle + flip)])
            t = min(length, _ray_extent(verts[-1], d, height, width))
            if t >= 2.0:
                angle += flip
                break
        else:
            # wedged in a corner: head for the image centre instead
            to_center = np.array([(height - 1) / 2.0, (width - 1) / 2.0]) - verts[-1]
            angle = math.atan2(to_center[0], to_center[1])
            d = np.array([math.sin(angle), math.cos(angle)])
            t = min(length, _ray_extent(verts[-1], d, height, width))
        verts.append(verts[-1] + t * d)
    return np.rint(np.array(verts)).astype(np.int64), angle


def crack_polylines(rng, shape, segments, branch_prob=0.3, foreground=None):
    """Random-walk crack skeleton: a main walk plus an optional side branch."""
    height, width = shape
    start = None
    for _ in range(100):
        start = (rng.uniform(0, height - 1), rng.uniform(0, width - 1))
        if foreground is None or foreground[int(round(start[0])), int(round(start[1]))]:
            break
    max_step = 0.12 * min(height, width)
    main, angle = _random_walk(rng, start, rng.uniform(0, 2 * math.pi), segments, max_step, height, width)
    lines = [main]
    if segments >= 2 and rng.uniform() < branch_prob:
        root = main[int(rng.integers(1, len(main)))]
        offset = rng.choice([-1.0, 1.0]) * rng.uniform(math.pi / 4, math.pi / 2)
        branch, _ = _random_walk(rng, root, angle + offset, max(1, segments // 2), max_step, height, width)
        lines.append(branch)
    return lines


def _dilate(mask, thickness):
    if thickness <= 1:
        return mask
    radius = thickness / 2.0
    yy, xx = np.mgrid[:thickness, :thickness] - (thickness - 1) / 2.0
    disk = yy**2 + xx**2 <= radius**2
    return ndimage.binary_dilation(mask, structure=disk)


def synth_crack(img, cfg: SynthConfig, rng, foreground=None) -> SynthResult:
    """Dilated random-walk cracks filled with a darkened copy of the local background."""
    img = _as_image(img)
    _check_size(img, cfg)
    height, width = img.shape[:2]
    mask = np.zeros((height, width), dtype=bool)
    polylines = []
    for _ in range(cfg.region_count):
        lines = crack_polylines(rng, (height, width), cfg.crack_segments, cfg.crack_branch_prob, foreground)
        thickness = int(rng.integers(cfg.crack_thickness_px[0], cfg.crack_thickness_px[1] + 1))
        skeleton = np.zeros_like(mask)
        for verts in lines:
            skeleton |= raster_polyline(verts, (height, width))
        mask |= _dilate(skeleton, thickness)
        polylines.extend(lines)
    if foreground is not None:
        mask &= np.asarray(foreground, dtype=bool)
    out = img.copy()
    if mask.any():
        darkening = rng.uniform(*cfg.crack_darkening)
        texture = 1.0 + rng.uniform(-0.15, 0.15, size=(height, width, 1))
        fill = np.clip(img * darkening * texture, 0.0, 1.0)
        out[mask] = fill[mask]
    return SynthResult(out, mask, "crack", {"polylines": polylines})


def apply_noise(img, region, kind, amplitude, rng):
    """Add ``kind`` noise of scale ``amplitude`` inside ``region`` and clamp to [0, 1]."""
    shape = (int(region.sum()), img.shape[2])
    if kind == "uniform":
        noise = rng.uniform(-amplitude, amplitude, size=shape)
    elif kind == "gaussian":
        noise = rng.normal(0.0, amplitude, size=shape)
    elif kind == "positive":
        noise = np.abs(rng.normal(0.0, amplitude, size=shape))
    else:
        raise ConfigError(f"unknown noise kind {kind!r}")
    out = img.copy()
    out[region] = np.clip(img[region] + noise, 0.0, 1.0)
    return out


def synth_noise(img, cfg: SynthConfig, rng, foreground=None) -> SynthResult:
    img = _as_image(img)
    _check_size(img, cfg)
    mask, rects = _sample_regions(rng, cfg, *img.shape[:2], foreground)
    kind = cfg.noise_kind or NOISE_KINDS[int(rng.integers(len(NOISE_KINDS)))]
    amplitude = rng.uniform(*cfg.noise_amplitude)
    out = apply_noise(img, mask, kind, amplitude, rng)
    return SynthResult(out, mask, "noise", {"rects": rects, "kind": kind, "amplitude": amplitude})


_BASE_FUNCS = {
    "misplaced": synth_misplaced,
    "blurry": synth_blurry,
    "crack": synth_crack,
    "noise": synth_noise,
}


def synth_combined(img, cfg: SynthConfig, rng, foreground=None, types=None) -> SynthResult:
    """Apply two to four distinct base types in sequence; the mask is their union."""
    img = _as_image(img)
    _check_size(img, cfg)
    if types is None:
        count = int(rng.integers(2, len(BASE_TYPES) + 1))
        types = [BASE_TYPES[i] for i in rng.choice(len(BASE_TYPES), size=count, replace=False)]
    if len(set(types)) < 2:
        raise ConfigError("combined synthesis needs at least two distinct base types")
    out = img
    mask = np.zeros(img.shape[:2], dtype=bool)
    parts = []
    for name in types:
        res = _BASE_FUNCS[name](out, cfg, rng, foreground)
        out = res.image
        mask |= res.mask
        parts.append(res)
    return SynthResult(out, mask, "combined", {"types": list(types), "parts": parts})


def synthesize(img, cfg: SynthConfig, rng=None, foreground=None) -> SynthResult:
    """Dispatch on ``cfg.anomaly_type``; ``"mix"`` draws one of the five types uniformly."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    kind = cfg.anomaly_type
    if kind == "mix":
        kind = ANOMALY_TYPES[int(rng.integers(len(ANOMALY_TYPES)))]
    if kind == "combined":
        return synth_combined(img, cfg, rng, foreground)
    return _BASE_FUNCS[kind](img, cfg, rng, foreground)


def with_type(cfg: SynthConfig, anomaly_type: str) -> SynthConfig:
    return replace(cfg, anomaly_type=anomaly_type)
