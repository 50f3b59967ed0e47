"""Deterministic preprocessing and seeded geometric/photometric augmentation.

All functions take and return numpy arrays of shape (H, W). Randomness only ever
comes from an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage


@dataclass
class PreprocConfig:
    winsor_percentile: float | None = 92.5
    upper_only: bool = False
    hist_eq: bool = False
    target_size: tuple[int, int] = (224, 224)
    normalize01: bool = True

    def __post_init__(self):
        if self.winsor_percentile is not None and not 50 < self.winsor_percentile <= 100:
            raise ValueError(f"winsor_percentile must be in (50, 100], got {self.winsor_percentile}")
        self.target_size = tuple(int(v) for v in self.target_size)


@dataclass
class AugPolicy:
    """Declarative augmentation ranges.

    ``rotation_deg`` is a symmetric range in degrees, ``scale_range`` a
    multiplicative zoom (values > 1 zoom in about the centre), ``shear_range`` a
    horizontal shear factor, ``translate_frac`` a horizontal shift as a fraction
    of the width. ``crop_scale``, ``jitter`` and ``blur_*`` are only used by the
    MoCo-v2 style views.
    """

    rotation_deg: float = 0.0
    hflip_prob: float = 0.0
    scale_range: tuple[float, float] = (1.0, 1.0)
    shear_range: tuple[float, float] = (0.0, 0.0)
    translate_frac: float | None = None
    crop_scale: tuple[float, float] | None = None
    jitter: float = 0.0
    jitter_prob: float = 0.0
    blur_prob: float = 0.0
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    seed_stream: int = 0

    def __post_init__(self):
        self.scale_range = tuple(float(v) for v in self.scale_range)
        self.shear_range = tuple(float(v) for v in self.shear_range)
        self.blur_sigma = tuple(float(v) for v in self.blur_sigma)
        if self.crop_scale is not None:
            self.crop_scale = tuple(float(v) for v in self.crop_scale)
        for name in ("scale_range", "shear_range", "blur_sigma", "crop_scale"):
            rng = getattr(self, name)
            if rng is not None and rng[0] > rng[1]:
                raise ValueError(f"{name} must satisfy lo <= hi, got {rng}")
        for name in ("hflip_prob", "jitter_prob", "blur_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        if self.rotation_deg < 0:
            raise ValueError("rotation_deg is a symmetric half-range and must be >= 0")

    @property
    def is_identity(self) -> bool:
        return self == replace(AugPolicy(), seed_stream=self.seed_stream)


# Supplementary ablation's best policy
REFERENCE_POLICY = AugPolicy(rotation_deg=10.0, hflip_prob=0.5, scale_range=(1.0, 1.2), shear_range=(0.0, 0.1))


def _percentile_rank(percentile: float, n: int) -> int:
    """1-based nearest rank ``ceil(p/100 * n)``, at least 1, computed exactly."""
    rank = math.ceil(Fraction(str(percentile)) * n / 100)
    return min(max(rank, 1), n)


def nearest_rank(pixels: np.ndarray, percentile: float) -> float:
    flat = np.asarray(pixels).ravel()
    k = _percentile_rank(percentile, flat.size) - 1
    return np.partition(flat, k)[k]


def winsorize(pixels: np.ndarray, percentile: float = 92.5, upper_only: bool = False) -> np.ndarray:
    """Clamp intensities at nearest-rank percentiles.

    Two-sided by default: values above the ``percentile`` value and below the
    ``100 - percentile`` value are clamped. ``upper_only`` clamps only the top.
    """
    pixels = np.asarray(pixels)
    if pixels.size == 0:
        raise ValueError("winsorize needs a non-empty image")
    if not 50 < percentile <= 100:
        raise ValueError(f"percentile must be in (50, 100], got {percentile}")
    hi = nearest_rank(pixels, percentile)
    lo = pixels.min() if upper_only else nearest_rank(pixels, 100 - percentile)
    return np.clip(pixels, lo, hi).astype(pixels.dtype, copy=False)


def histogram_equalize(pixels: np.ndarray, offset: bool = True) -> np.ndarray:
    """Histogram equalisation by CDF remapping.

    Integer images keep their dtype; the output range is ``[0, L]`` with ``L`` 255
    for 8-bit and 65535 for 16-bit input. Float images in [0, 1] are quantised to
    8 bits and returned as floats in [0, 1].

    With ``offset`` (default) level ``v`` maps to
    ``round(L * (cdf(v) - cdf_min) / (1 - cdf_min))`` so the darkest occupied level
    lands on 0 and a uniform histogram is a fixed point. With ``offset=False`` the
    plain ``round(L * cdf(v))`` rule is used. A constant image maps to all zeros.
    Rounding is half-to-even (numpy).
    """
    pixels = np.asarray(pixels)
    as_float = np.issubdtype(pixels.dtype, np.floating)
    if as_float:
        levels = np.round(np.clip(pixels, 0.0, 1.0) * 255).astype(np.int64)
        top = 255
    elif pixels.dtype == np.uint8:
        levels, top = pixels.astype(np.int64), 255
    elif pixels.dtype == np.uint16 or pixels.max() > 255:
        levels, top = pixels.astype(np.int64), 65535
    else:
        levels, top = pixels.astype(np.int64), 255
    if levels.min() < 0:
        raise ValueError("histogram_equalize needs non-negative levels")

    counts = np.bincount(levels.ravel(), minlength=top + 1)
    cdf = np.cumsum(counts) / levels.size
    if np.count_nonzero(counts) <= 1:
        lut = np.zeros(top + 1)
    elif offset:
        cdf_min = cdf[np.flatnonzero(counts)[0]]
        lut = np.round(top * (cdf - cdf_min) / (1.0 - cdf_min))
    else:
        lut = np.round(top * cdf)
    out = lut[levels]
    if as_float:
        return (out / 255.0).astype(np.float32)
    return out.astype(pixels.dtype)


def normalize01(pixels: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant image becomes all zeros."""
    x = np.asarray(pixels, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return np.zeros(x.shape, dtype=np.float32)
    return ((x - lo) / (hi - lo)).astype(np.float32)


def resize(pixels: np.ndarray, target_size: tuple[int, int], mode: str = "bilinear") -> np.ndarray:
    """Resize with bilinear (half-pixel centres) or nearest interpolation."""
    target_size = tuple(int(v) for v in target_size)
    if min(target_size) <= 0:
        raise ValueError(f"target_size must be positive, got {target_size}")
    x = np.asarray(pixels)
    if x.shape == target_size:
        return x.astype(np.float32) if mode == "bilinear" else x.copy()
    t = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))[None, None]
    if mode == "bilinear":
        out = F.interpolate(t, size=target_size, mode="bilinear", align_corners=False)
    elif mode == "nearest":
        out = F.interpolate(t, size=target_size, mode="nearest")
    else:
        raise ValueError(f"unknown resize mode {mode!r}")
    out = out[0, 0].numpy()
    return out if mode == "bilinear" else out.astype(x.dtype)


def preprocess(pixels: np.ndarray, cfg: PreprocConfig) -> np.ndarray:
    """Winsorise / equalise, scale to [0, 1] and resize; returns float32."""
    x = np.asarray(pixels)
    if cfg.hist_eq:
        x = histogram_equalize(x)
    if cfg.winsor_percentile is not None:
        x = winsorize(x, cfg.winsor_percentile, upper_only=cfg.upper_only)
    x = normalize01(x) if cfg.normalize01 else x.astype(np.float32)
    return resize(x, cfg.target_size)


# --------------------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AffineParams:
    flip: bool = False
    angle: float = 0.0
    scale: float = 1.0
    shear: float = 0.0
    shift: float = 0.0  # horizontal, in pixels

    @property
    def is_identity(self) -> bool:
        return (not self.flip and self.angle == 0.0 and self.scale == 1.0
                and self.shear == 0.0 and self.shift == 0.0)


def _uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    # draw even for degenerate ranges so the stream layout is policy independent
    u = rng.random()
    return float(lo) if lo == hi else float(lo + (hi - lo) * u)


def sample_affine(policy: AugPolicy, width: int, rng: np.random.Generator) -> AffineParams:
    flip = bool(rng.random() < policy.hflip_prob)
    angle = _uniform(rng, -policy.rotation_deg, policy.rotation_deg)
    scale = _uniform(rng, *policy.scale_range)
    shear = _uniform(rng, *policy.shear_range)
    t = policy.translate_frac or 0.0
    shift = _uniform(rng, -t * width, t * width)
    return AffineParams(flip, angle, scale, shear, shift)


def affine_matrix(params: AffineParams) -> np.ndarray:
    """Forward 2x2 map on centred ``(row, col)`` offsets.

    Applies scale, then horizontal shear, then rotation. A positive angle rotates
    the content counter-clockwise as displayed (rows grow downward).
    """
    th = np.deg2rad(params.angle)
    c, s = np.cos(th), np.sin(th)
    # (row, col) order with rows pointing down: a point right of centre moves up
    rot = np.array([[c, -s], [s, c]])
    shear = np.array([[1.0, 0.0], [params.shear, 1.0]])
    return rot @ shear @ (params.scale * np.eye(2))


def warp(image: np.ndarray, params: AffineParams, order: int, cval: float = 0.0) -> np.ndarray:
    """Apply flip then affine (about the image centre) with the given spline order."""
    x = np.asarray(image)
    if params.flip:
        x = x[:, ::-1]
    if replace(params, flip=False).is_identity:
        return np.ascontiguousarray(x)
    h, w = x.shape
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    fwd = affine_matrix(params)
    inv = np.linalg.inv(fwd)
    shift = np.array([0.0, params.shift])
    # input = inv @ (output - centre - shift) + centre
    offset = centre - inv @ (centre + shift)
    out = ndimage.affine_transform(
        x.astype(np.float64), inv, offset=offset, order=order, mode="constant", cval=cval
    )
    return out.astype(x.dtype) if order == 0 else out.astype(np.float32)


def random_resized_crop(image, mask, scale_range, rng):
    h, w = image.shape
    area = h * w * _uniform(rng, *scale_range)
    log_ratio = _uniform(rng, math.log(3 / 4), math.log(4 / 3))
    ch = int(round(math.sqrt(area / math.exp(log_ratio))))
    cw = int(round(math.sqrt(area * math.exp(log_ratio))))
    ch, cw = min(max(ch, 1), h), min(max(cw, 1), w)
    r0 = int(rng.integers(0, h - ch + 1))
    c0 = int(rng.integers(0, w - cw + 1))
    crop = resize(image[r0:r0 + ch, c0:c0 + cw], (h, w))
    if mask is not None:
        mask = resize(mask[r0:r0 + ch, c0:c0 + cw], (h, w), mode="nearest")
    return crop, mask


def apply_augment(
    pixels: np.ndarray,
    mask: np.ndarray | None,
    policy: AugPolicy,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Draw one set of parameters from ``policy`` and apply it to image and mask.

    The mask receives the identical geometric transform with nearest-neighbour
    sampling; photometric jitter and blur touch the image only. Pixels rotated
    in from outside are filled with 0. Output dimensions always equal the input's.
    """
    image = np.asarray(pixels)
    if mask is not None and np.shape(mask) != image.shape:
        raise ValueError(f"mask shape {np.shape(mask)} != image shape {image.shape}")
    if policy.is_identity:
        return image.copy(), None if mask is None else np.asarray(mask).copy()

    if policy.crop_scale is not None:
        image, mask = random_resized_crop(image, mask, policy.crop_scale, rng)
    params = sample_affine(policy, image.shape[1], rng)
    out = warp(image, params, order=1)
    out_mask = None if mask is None else warp(np.asarray(mask), params, order=0)

    if policy.jitter_prob > 0 and rng.random() < policy.jitter_prob:
        b = _uniform(rng, -policy.jitter, policy.jitter)
        c = _uniform(rng, 1 - policy.jitter, 1 + policy.jitter)
        mean = float(out.mean())
        out = np.clip((out - mean) * c + mean + b, 0.0, 1.0).astype(np.float32)
    if policy.blur_prob > 0 and rng.random() < policy.blur_prob:
        # sigma range is defined at the 224 reference size
        sigma = _uniform(rng, *policy.blur_sigma) * out.shape[0] / 224
        out = ndimage.gaussian_filter(out, sigma=sigma).astype(np.float32)
    return out, out_mask


MOCO_VARIANTS = ("cxr", "cxrModified", "v2")


def moco_policy(variant: str) -> AugPolicy:
    if variant == "cxr":
        return AugPolicy(rotation_deg=10.0, hflip_prob=0.5)
    if variant == "cxrModified":
        return AugPolicy(rotation_deg=20.0, hflip_prob=0.5, translate_frac=0.2, scale_range=(1.0, 1.2))
    if variant == "v2":
        # grayscale analogue: colour jitter -> brightness/contrast, grayscale -> identity
        return AugPolicy(hflip_prob=0.5, crop_scale=(0.2, 1.0), jitter=0.4, jitter_prob=0.8, blur_prob=0.5)
    raise ValueError(f"unknown MoCo variant {variant!r}; expected one of {MOCO_VARIANTS}")


class TwoViewAugment:
    """Produce two independently augmented views of one image."""

    def __init__(self, policy: AugPolicy):
        self.policy = policy

    def __call__(self, pixels, rng_q: np.random.Generator, rng_k: np.random.Generator):
        view_q, _ = apply_augment(pixels, None, self.policy, rng_q)
        view_k, _ = apply_augment(pixels, None, self.policy, rng_k)
        return view_q, view_k


def moco_aug_pipeline(variant: str | AugPolicy) -> TwoViewAugment:
    policy = variant if isinstance(variant, AugPolicy) else moco_policy(variant)
    return TwoViewAugment(policy)


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for a (seed, key...) tuple, e.g. (seed, epoch, index)."""
    return np.random.default_rng([int(seed), *(int(k) for k in keys)])
