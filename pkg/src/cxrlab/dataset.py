"""Image records, manifest ingestion, opacity masks, splits and phantom data."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("id", "path", "label", "boxes", "group")


class ManifestError(ValueError):
    """Raised for malformed manifest rows."""


class ClassLabel(IntEnum):
    NEGATIVE = 0
    TYPICAL = 1
    INDETERMINATE = 2
    ATYPICAL = 3

    @classmethod
    def parse(cls, value: str | int | ClassLabel) -> ClassLabel:
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        key = str(value).strip().lower()
        for member in cls:
            if member.name.lower() == key:
                return member
        raise ValueError(
            f"unknown label {value!r}; expected one of {[m.name.lower() for m in cls]}"
        )

    @property
    def display(self) -> str:
        return self.name.lower()


CLASS_NAMES = [c.display for c in ClassLabel]


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def clip(self, height: int, width: int) -> BoundingBox | None:
        """Intersect with the image rectangle; ``None`` if nothing is left."""
        x0, x1 = max(self.x, 0), min(self.x + self.w, width)
        y0, y1 = max(self.y, 0), min(self.y + self.h, height)
        if x1 <= x0 or y1 <= y0:
            return None
        return BoundingBox(x0, y0, x1 - x0, y1 - y0)

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass
class ImageRecord:
    id: str
    pixels: np.ndarray
    label: ClassLabel
    boxes: list[BoundingBox] = field(default_factory=list)
    group: str | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass
class DatasetSplit:
    train_ids: list[str]
    test_ids: list[str]
    fold_index: int = 0
    seed: int = 0

    def select(self, records: list[ImageRecord]) -> tuple[list[ImageRecord], list[ImageRecord]]:
        by_id = {r.id: r for r in records}
        return [by_id[i] for i in self.train_ids], [by_id[i] for i in self.test_ids]


def _parse_boxes(text: str, row_num: int) -> list[BoundingBox]:
    text = (text or "").strip()
    if not text:
        return []
    boxes = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split(",")
        if len(parts) != 4:
            raise ManifestError(f"row {row_num}: box {chunk!r} is not an x,y,w,h quadruple")
        try:
            x, y, w, h = (float(p) for p in parts)
        except ValueError as exc:
            raise ManifestError(f"row {row_num}: non-numeric box {chunk!r}") from exc
        if w <= 0 or h <= 0:
            raise ManifestError(f"row {row_num}: box {chunk!r} has non-positive size")
        boxes.append(BoundingBox(x, y, w, h))
    return boxes


def read_image(path: str | Path) -> np.ndarray:
    """Read a single-channel 8- or 16-bit PNG as its native integer dtype."""
    with Image.open(path) as img:
        if img.mode in ("I;16", "I;16B", "I;16L"):
            arr = np.array(img, dtype=np.uint16)
        elif img.mode == "I":
            arr = np.array(img).astype(np.uint16)
        else:
            arr = np.array(img.convert("L"), dtype=np.uint8)
    return arr


def write_image(path: str | Path, pixels: np.ndarray) -> None:
    # dtype selects the mode: uint16 -> "I;16", uint8 -> "L"
    if pixels.dtype != np.uint16:
        pixels = np.asarray(pixels, dtype=np.uint8)
    Image.fromarray(np.ascontiguousarray(pixels)).save(path)


def load_manifest(path: str | Path) -> list[ImageRecord]:
    """Load a manifest CSV into image records.

    Image paths are resolved relative to the manifest's directory. Rows sharing an
    ``id`` are merged into one record carrying all their boxes. Boxes are clipped
    to the image bounds; boxes lying entirely outside are dropped with a warning.

    Raises:
        FileNotFoundError: the manifest or a referenced image is missing.
        ManifestError: a row is malformed (the message names the row number).
        ValueError: a label string is not one of the four classes.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    records: dict[str, ImageRecord] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        missing = {"path", "label"} - set(reader.fieldnames)
        if missing:
            raise ManifestError(f"manifest header lacks columns {sorted(missing)}")
        unknown = set(reader.fieldnames) - set(MANIFEST_COLUMNS)
        if unknown:
            raise ManifestError(f"manifest header has unknown columns {sorted(unknown)}")
        # header is line 1
        for row_num, row in enumerate(reader, start=2):
            if None in row or any(row.get(k) is None for k in ("path", "label")):
                raise ManifestError(f"row {row_num}: wrong number of fields")
            rel = row["path"].strip()
            if not rel:
                raise ManifestError(f"row {row_num}: empty path")
            rec_id = (row.get("id") or "").strip() or Path(rel).stem
            try:
                label = ClassLabel.parse(row["label"])
            except ValueError as exc:
                raise ValueError(f"row {row_num}: {exc}") from None
            boxes = _parse_boxes(row.get("boxes") or "", row_num)
            group = (row.get("group") or "").strip() or None

            rec = records.get(rec_id)
            if rec is None:
                img_path = root / rel
                if not img_path.is_file():
                    raise FileNotFoundError(f"row {row_num}: image not found: {img_path}")
                rec = ImageRecord(rec_id, read_image(img_path), label, [], group)
                records[rec_id] = rec
            elif rec.label != label:
                raise ManifestError(
                    f"row {row_num}: id {rec_id!r} repeated with a different label"
                )
            h, w = rec.shape
            for box in boxes:
                clipped = box.clip(h, w)
                if clipped is None:
                    logger.warning("row %d: box %s lies outside the image, dropped", row_num, box)
                else:
                    rec.boxes.append(clipped)
    return list(records.values())


def write_manifest(path: str | Path, records: list[ImageRecord], paths: dict[str, str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for rec in records:
            boxes = ";".join(f"{_fmt(b.x)},{_fmt(b.y)},{_fmt(b.w)},{_fmt(b.h)}" for b in rec.boxes)
            writer.writerow([rec.id, paths[rec.id], rec.label.display, boxes, rec.group or ""])


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def _floor(v: float) -> int:
    # guard against 2.0000000001-style artefacts of the rescale
    return math.floor(round(v, 9))


def _ceil(v: float) -> int:
    return math.ceil(round(v, 9))


def box_to_slices(
    box: BoundingBox, src_size: tuple[int, int], out_size: tuple[int, int]
) -> tuple[slice, slice] | None:
    """Pixel rows/cols covered by ``box`` once rescaled from ``src_size`` to ``out_size``.

    Start coordinates are floored and end coordinates ceiled so that no annotated
    pixel is lost at low resolution.
    """
    sy = out_size[0] / src_size[0]
    sx = out_size[1] / src_size[1]
    r0 = max(_floor(box.y * sy), 0)
    r1 = min(_ceil((box.y + box.h) * sy), out_size[0])
    c0 = max(_floor(box.x * sx), 0)
    c1 = min(_ceil((box.x + box.w) * sx), out_size[1])
    if r1 <= r0 or c1 <= c0:
        return None
    return slice(r0, r1), slice(c0, c1)


def boxes_to_mask(record: ImageRecord, out_size: tuple[int, int] | None = None) -> np.ndarray:
    """Rasterise the record's boxes into a binary ``uint8`` opacity mask."""
    src = record.shape
    out_size = tuple(out_size) if out_size is not None else src
    if out_size[0] <= 0 or out_size[1] <= 0:
        raise ValueError(f"out_size must be positive, got {out_size}")
    mask = np.zeros(out_size, dtype=np.uint8)
    for box in record.boxes:
        sl = box_to_slices(box, src, out_size)
        if sl is not None:
            mask[sl] = 1
    return mask


# --------------------------------------------------------------------------- splits


def _units(records: list[ImageRecord]) -> dict[ClassLabel, list[list[str]]]:
    """Group record ids into split units (a group never straddles train/test).

    A unit's class is the label of its lexicographically first member.
    """
    groups: dict[str, list[ImageRecord]] = {}
    for rec in records:
        key = f"g:{rec.group}" if rec.group is not None else f"r:{rec.id}"
        groups.setdefault(key, []).append(rec)
    by_class: dict[ClassLabel, list[list[str]]] = {c: [] for c in ClassLabel}
    for key in sorted(groups):
        members = sorted(groups[key], key=lambda r: r.id)
        by_class[members[0].label].append([r.id for r in members])
    return by_class


def _check_unique(records: list[ImageRecord]) -> None:
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("record ids must be unique")


def make_split(records: list[ImageRecord], test_fraction: float = 0.2, seed: int = 0) -> DatasetSplit:
    """Stratified, group-preserving train/test split.

    Per-class test quotas are ``floor(f * n_c)`` topped up by largest remainder so
    the total equals ``round(f * N)`` over the stratifiable units. Classes with
    fewer than two units stay entirely in train.
    """
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    if len(records) < 2:
        raise ValueError("need at least 2 records to split")
    _check_unique(records)
    rng = np.random.default_rng(seed)
    by_class = _units(records)

    eligible = {}
    for cls, units in by_class.items():
        if len(units) == 0:
            continue
        if len(units) < 2:
            logger.warning("class %s has < 2 members; kept whole in train", cls.display)
            continue
        eligible[cls] = units

    quotas = {c: test_fraction * len(u) for c, u in eligible.items()}
    alloc = {c: math.floor(q) for c, q in quotas.items()}
    target = int(math.floor(sum(quotas.values()) + 0.5))
    by_remainder = sorted(eligible, key=lambda c: (-(quotas[c] - alloc[c]), int(c)))
    for c in by_remainder[: max(0, target - sum(alloc.values()))]:
        alloc[c] += 1

    train, test = [], []
    for cls in ClassLabel:
        units = by_class[cls]
        if cls not in eligible:
            train.extend(i for u in units for i in u)
            continue
        order = rng.permutation(len(units))
        n_test = min(alloc[cls], len(units) - 1)
        for rank, idx in enumerate(order):
            (test if rank < n_test else train).extend(units[idx])
    return DatasetSplit(sorted(train), sorted(test), 0, seed)


def make_kfolds(records: list[ImageRecord], k: int = 5, seed: int = 0) -> list[DatasetSplit]:
    """Stratified k-fold partition; fold ``i``'s test ids are the i-th fold.

    Units of each class are shuffled and dealt round-robin, continuing the dealer
    position across classes so fold sizes differ by at most one unit.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > len(records):
        raise ValueError(f"k={k} exceeds the number of records ({len(records)})")
    _check_unique(records)
    rng = np.random.default_rng(seed)
    folds: list[list[str]] = [[] for _ in range(k)]
    pos = 0
    for cls, units in _units(records).items():
        if 0 < len(units) < k:
            logger.warning("class %s has fewer than k=%d members", cls.display, k)
        for idx in rng.permutation(len(units)):
            folds[pos % k].extend(units[idx])
            pos += 1
    all_ids = sorted(r.id for r in records)
    splits = []
    for i, fold in enumerate(folds):
        test = set(fold)
        splits.append(DatasetSplit([j for j in all_ids if j not in test], sorted(test), i, seed))
    return splits


# --------------------------------------------------------------------------- phantoms

# Lung fields as (centre_row, centre_col, semi_axis_rows, semi_axis_cols) in image fractions.
# "left"/"right" refer to image columns.
LUNG_FIELDS = {
    "left": (0.50, 0.32, 0.28, 0.14),
    "right": (0.50, 0.68, 0.28, 0.14),
}
NOISE_SIGMA = 0.04
LESION_CONTRAST = 2.0


def lung_ellipses(image_size: tuple[int, int]) -> dict[str, tuple[float, float, float, float]]:
    """Lung ellipses in pixel units for a phantom of ``image_size``."""
    h, w = image_size
    return {
        side: (cr * (h - 1), cc * (w - 1), ar * h, ac * w)
        for side, (cr, cc, ar, ac) in LUNG_FIELDS.items()
    }


def in_ellipse(row: float, col: float, ellipse: tuple[float, float, float, float]) -> bool:
    cr, cc, ar, ac = ellipse
    return ((row - cr) / ar) ** 2 + ((col - cc) / ac) ** 2 <= 1.0


def _ellipse_field(rr, cc, ellipse):
    cr, ccen, ar, ac = ellipse
    return ((rr - cr) / ar) ** 2 + ((cc - ccen) / ac) ** 2


def _anatomy(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.full((h, w), 0.08)
    torso = (((rr - 0.52 * h) / (0.55 * h)) ** 2 + ((cc - 0.5 * (w - 1)) / (0.47 * w)) ** 2) <= 1.0
    img[torso] = 0.72
    lungs = np.zeros((h, w), dtype=bool)
    for ellipse in lung_ellipses((h, w)).values():
        lungs |= _ellipse_field(rr, cc, ellipse) <= 1.0
    # faint rib shadows inside the lungs
    phase = rng.uniform(0, 2 * np.pi)
    ribs = 0.03 * np.sin(2 * np.pi * rr / (0.09 * h) + phase)
    img[lungs] = 0.30 + ribs[lungs]
    img = ndimage.gaussian_filter(img, sigma=max(h, w) / 96)
    return img * rng.uniform(0.92, 1.08)


def _point_in_lung(ellipse, rng, row_range, col_range, max_radius=0.75):
    """Rejection-sample a point inside a sub-ellipse, restricted to normalised ranges."""
    cr, cc, ar, ac = ellipse
    for _ in range(1000):
        u = rng.uniform(*row_range)
        v = rng.uniform(*col_range)
        if u * u + v * v <= max_radius**2:
            return cr + u * ar, cc + v * ac
    raise RuntimeError("could not place lesion")  # pragma: no cover


def _support_box(support: np.ndarray) -> BoundingBox:
    rows = np.flatnonzero(support.any(axis=1))
    cols = np.flatnonzero(support.any(axis=0))
    return BoundingBox(int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))


def _blob(h, w, centre, sigma):
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    d2 = (rr - centre[0]) ** 2 + (cc - centre[1]) ** 2
    profile = np.exp(-d2 / (2 * sigma**2))
    return profile, d2 <= (2 * sigma) ** 2


def _wedge_or_line(h, w, ellipse, rng):
    cr, cc, ar, ac = ellipse
    rr, cc_grid = np.mgrid[0:h, 0:w].astype(np.float64)
    inside = _ellipse_field(rr, cc_grid, ellipse) <= 0.8**2
    if rng.random() < 0.5:
        # wedge: half-plane cut through the lung base
        angle = rng.uniform(np.deg2rad(15), np.deg2rad(40))
        base_row = cr + rng.uniform(0.25, 0.45) * ar
        side = 1 if rng.random() < 0.5 else -1
        support = inside & ((rr - base_row) > side * np.tan(angle) * (cc_grid - cc))
    else:
        theta = rng.uniform(0, np.pi)
        offset = rng.uniform(-0.3, 0.3) * min(ar, ac)
        dist = np.abs((rr - cr) * np.cos(theta) - (cc_grid - cc) * np.sin(theta) - offset)
        support = inside & (dist <= max(1.0, 0.025 * w))
    if support.sum() < 4:
        support = inside & (np.abs(rr - cr) <= max(1.0, 0.025 * h))
    return support.astype(np.float64), support


def generate_phantom_dataset(
    n: int,
    image_size: tuple[int, int] = (64, 64),
    seed: int = 0,
    lesion_contrast: float = LESION_CONTRAST,
    noise_sigma: float = NOISE_SIGMA,
) -> list[ImageRecord]:
    """Synthetic chest-radiograph phantoms with class-conditional opacities.

    Each image is two dark elliptical lung fields on a brighter torso, plus
    Gaussian noise. Lesions raise intensity by ``lesion_contrast * noise_sigma``
    at their peak:

    - negative: no lesions.
    - typical: 2-4 large soft blobs, at least one per lung, in the peripheral
      lower half of each lung.
    - indeterminate: 1-2 smaller soft blobs in the upper/central part of one lung.
    - atypical: one sharp-edged wedge or line inside one lung.

    Labels cycle through the four classes so counts differ by at most one. Every
    record is generated from its own ``(seed, index)`` stream, so the output is
    bit-reproducible and independent of ``n`` for a given index.
    """
    if n < 4:
        raise ValueError(f"n must be >= 4, got {n}")
    h, w = image_size
    if h < 32 or w < 32:
        raise ValueError(f"image_size must be at least 32x32, got {image_size}")
    amp = lesion_contrast * noise_sigma
    ellipses = lung_ellipses((h, w))
    width = len(str(n - 1))
    records = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        label = ClassLabel(i % 4)
        img = _anatomy(h, w, rng)
        boxes: list[BoundingBox] = []
        if label == ClassLabel.TYPICAL:
            count = int(rng.integers(2, 5))
            sides = ["left", "right"] + [str(rng.choice(["left", "right"])) for _ in range(count - 2)]
            for side in sides:
                lateral = (-0.75, -0.1) if side == "left" else (0.1, 0.75)
                centre = _point_in_lung(ellipses[side], rng, (0.1, 0.75), lateral)
                sigma = rng.uniform(0.045, 0.065) * w
                profile, support = _blob(h, w, centre, sigma)
                img += amp * profile
                boxes.append(_support_box(support))
        elif label == ClassLabel.INDETERMINATE:
            side = str(rng.choice(["left", "right"]))
            for _ in range(int(rng.integers(1, 3))):
                centre = _point_in_lung(ellipses[side], rng, (-0.75, 0.0), (-0.4, 0.4))
                sigma = rng.uniform(0.03, 0.045) * w
                profile, support = _blob(h, w, centre, sigma)
                img += amp * profile
                boxes.append(_support_box(support))
        elif label == ClassLabel.ATYPICAL:
            side = str(rng.choice(["left", "right"]))
            profile, support = _wedge_or_line(h, w, ellipses[side], rng)
            img += amp * profile
            boxes.append(_support_box(support))
        img += rng.normal(0.0, noise_sigma, size=(h, w))
        pixels = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
        records.append(ImageRecord(f"phantom_{i:0{width}d}", pixels, label, boxes))
    return records
