"""Self-supervised samples: lung-targeted and centre inpainting masks, MoCo view pairs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .transforms import AugPolicy, moco_aug_pipeline

REFERENCE_SIZE = 224
TARGETED_SIZE_RANGE = (17, 32)
CENTER_MASK_SIZE = (100, 100)

# margins of the lung constraint region as fractions of the image
MARGIN_LEFT_RIGHT = Fraction(10, 100)
MARGIN_TOP = Fraction(15, 100)
MARGIN_BOTTOM = Fraction(20, 100)


@dataclass(frozen=True)
class MaskSpec:
    x: int
    y: int
    w: int
    h: int
    side: str = "center"

    def __post_init__(self):
        if self.side not in ("left", "right", "center"):
            raise ValueError(f"side must be left/right/center, got {self.side!r}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError("mask width and height must be positive")

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.y, self.y + self.h), slice(self.x, self.x + self.w)

    def overlaps(self, other: MaskSpec) -> bool:
        return (self.x < other.x + other.w and other.x < self.x + self.w
                and self.y < other.y + other.h and other.y < self.y + self.h)


@dataclass
class InpaintSample:
    input: np.ndarray
    target: np.ndarray
    masks: list[MaskSpec] = field(default_factory=list)
    loss_mask: np.ndarray | None = None


def constraint_region(image_size: tuple[int, int], min_mask: int = TARGETED_SIZE_RANGE[0]):
    """Half-open ``(row0, row1, col0, col1)`` box where lung masks may be placed.

    Excludes 10% of the width on each side, 15% of the height at the top and
    20% at the bottom; start bounds are ceiled and end bounds floored.
    """
    h, w = (int(v) for v in image_size)
    if h < 32 or w < 32:
        raise ValueError(f"image must be at least 32x32, got {image_size}")
    row0 = math.ceil(MARGIN_TOP * h)
    row1 = math.floor((1 - MARGIN_BOTTOM) * h)
    col0 = math.ceil(MARGIN_LEFT_RIGHT * w)
    col1 = math.floor((1 - MARGIN_LEFT_RIGHT) * w)
    if row1 - row0 < min_mask or col1 - col0 < min_mask:
        raise ValueError(
            f"constraint region {row1 - row0}x{col1 - col0} is smaller than the "
            f"{min_mask}x{min_mask} mask; use smaller masks for this image size"
        )
    return row0, row1, col0, col1


def scale_to_image(size: int, image_size: tuple[int, int], reference: int = REFERENCE_SIZE) -> int:
    """Rescale a mask side defined at ``reference`` resolution to ``image_size``."""
    return max(1, int(round(size * min(image_size) / reference)))


def scaled_size_range(image_size, size_range=TARGETED_SIZE_RANGE, reference=REFERENCE_SIZE):
    return tuple(scale_to_image(s, image_size, reference) for s in size_range)


def targeted_lung_masks(
    image_size: tuple[int, int],
    size_range: tuple[int, int] = TARGETED_SIZE_RANGE,
    rng: np.random.Generator | None = None,
) -> tuple[MaskSpec, MaskSpec]:
    """One square mask per lung inside the constraint region.

    Each side length is drawn uniformly from the inclusive integer ``size_range``.
    The left mask ends at or before ``floor(w/2)``, the right one starts at or
    after ``ceil(w/2)``, so the pair never overlaps.
    """
    if rng is None:
        rng = np.random.default_rng()
    lo, hi = (int(v) for v in size_range)
    if not 0 < lo <= hi:
        raise ValueError(f"invalid size_range {size_range}")
    h, w = image_size
    row0, row1, col0, col1 = constraint_region(image_size, min_mask=hi)
    mid_lo, mid_hi = w // 2, -(-w // 2)
    if mid_lo - col0 < hi or col1 - mid_hi < hi:
        raise ValueError(f"lung half-regions too narrow for {hi}px masks at {image_size}")

    def draw(side, c_start, c_end):
        s = int(rng.integers(lo, hi + 1))
        y = int(rng.integers(row0, row1 - s + 1))
        x = int(rng.integers(c_start, c_end - s + 1))
        return MaskSpec(x, y, s, s, side)

    return draw("left", col0, mid_lo), draw("right", mid_hi, col1)


def center_mask(image_size: tuple[int, int], mask_size: tuple[int, int] = CENTER_MASK_SIZE) -> MaskSpec:
    h, w = image_size
    mh, mw = mask_size
    if mh > h or mw > w:
        raise ValueError(f"mask {mask_size} larger than image {image_size}")
    return MaskSpec((w - mw) // 2, (h - mh) // 2, mw, mh, "center")


def make_inpaint_sample(
    pixels: np.ndarray,
    masks: list[MaskSpec],
    fill_value: float | None = None,
) -> InpaintSample:
    """Blank out ``masks`` in a copy of ``pixels``.

    ``fill_value`` defaults to the image mean; training passes the dataset mean.
    """
    target = np.asarray(pixels)
    h, w = target.shape
    for i, m in enumerate(masks):
        if m.x < 0 or m.y < 0 or m.x + m.w > w or m.y + m.h > h:
            raise ValueError(f"mask {m} lies outside the {h}x{w} image")
        for other in masks[i + 1:]:
            if m.overlaps(other):
                raise ValueError(f"masks {m} and {other} overlap")
    if fill_value is None:
        fill_value = float(target.mean())
    loss_mask = np.zeros((h, w), dtype=np.uint8)
    for m in masks:
        loss_mask[m.slices] = 1
    inp = target.astype(np.float32, copy=True)
    inp[loss_mask.astype(bool)] = fill_value
    return InpaintSample(inp, target, list(masks), loss_mask)


def moco_pair(pixels, variant: str | AugPolicy, rng_q: np.random.Generator, rng_k: np.random.Generator):
    """Two views of ``pixels`` drawn from independent generators."""
    return moco_aug_pipeline(variant)(pixels, rng_q, rng_k)
