"""Post-hoc analysis: GradCAM, feature maps, embedding export, box-size statistics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .dataset import CLASS_NAMES, ClassLabel, ImageRecord
from .models import class_logits


class LayerError(KeyError):
    def __str__(self):
        return str(self.args[0])


def default_layer(model: nn.Module) -> str:
    """Last spatial stage of the model's encoder."""
    encoder = getattr(model, "encoder", None)
    if encoder is None or not getattr(encoder, "stage_names", None):
        raise LayerError("model has no encoder stages; pass a layer name explicitly")
    return f"encoder.{encoder.stage_names[-1]}"


def resolve_layer(model: nn.Module, name: str | None) -> tuple[str, nn.Module]:
    name = name or default_layer(model)
    modules = dict(model.named_modules())
    if name not in modules or name == "":
        available = [n for n in modules if n]
        raise LayerError(f"unknown layer {name!r}; available layers: {', '.join(available)}")
    return name, modules[name]


def _as_batch(image) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(image, dtype=np.float32))
    while x.dim() < 4:
        x = x.unsqueeze(0)
    return x


def _capture(model: nn.Module, layer: nn.Module, x: torch.Tensor, keep_grad: bool):
    """Run ``model`` on ``x`` and return (output, activation of ``layer``)."""
    store = {}

    def hook(_module, _inp, out):
        if keep_grad:
            out.retain_grad()
        store["act"] = out

    handle = layer.register_forward_hook(hook)
    try:
        out = model(x)
    finally:
        handle.remove()
    if "act" not in store:
        raise LayerError("layer was not reached during the forward pass")
    return out, store["act"]


@dataclass
class Heatmap:
    values: np.ndarray  # H x W in [0, 1]
    source_layer: str
    target_class: int
    class_names: list[str] = field(default_factory=lambda: list(CLASS_NAMES))

    @property
    def target_name(self) -> str:
        return self.class_names[self.target_class] if self.target_class < len(self.class_names) else str(self.target_class)

    def inside_outside(self, mask: np.ndarray) -> tuple[float, float]:
        """Mean heatmap value inside and outside a binary mask of the same size."""
        m = np.asarray(mask, dtype=bool)
        if m.shape != self.values.shape:
            raise ValueError(f"mask {m.shape} vs heatmap {self.values.shape}")
        inside = float(self.values[m].mean()) if m.any() else float("nan")
        outside = float(self.values[~m].mean()) if (~m).any() else float("nan")
        return inside, outside

    def save(self, stem: str | Path, image: np.ndarray | None = None) -> tuple[Path, Path]:
        """Write ``stem.png`` (overlay when ``image`` is given) and ``stem.npy``."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        np.save(stem.with_suffix(".npy"), self.values)
        heat = np.round(self.values * 255).astype(np.uint8)
        if image is None:
            rgb = np.stack([heat, np.zeros_like(heat), 255 - heat], axis=-1)
        else:
            gray = np.asarray(image, dtype=np.float64)
            span = gray.max() - gray.min()
            gray = (gray - gray.min()) / span if span > 0 else np.zeros_like(gray)
            g = np.round(gray * 255).astype(np.uint8)
            alpha = 0.5 * self.values
            red = np.round((1 - alpha) * g + alpha * 255).astype(np.uint8)
            rgb = np.stack([red, g, g], axis=-1)
        png = stem.with_suffix(".png")
        Image.fromarray(rgb).save(png)
        return png, stem.with_suffix(".npy")


def _class_index(target) -> int:
    if isinstance(target, str):
        return int(ClassLabel.parse(target))
    return int(target)


def grad_cam(model: nn.Module, image, target_class, layer_name: str | None = None) -> Heatmap:
    """Gradient-weighted class activation map for ``target_class``.

    Channel weights are the spatial mean of the target logit's gradient with
    respect to the layer's activation; the ReLU of the weighted channel sum is
    upsampled bilinearly to the input size and divided by its maximum.

    Raises:
        LayerError: ``layer_name`` is not a module of ``model``; the message
            lists the available names.
    """
    name, layer = resolve_layer(model, layer_name)
    target = _class_index(target_class)
    x = _as_batch(image)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            out, act = _capture(model, layer, x, keep_grad=True)
            logits = out.class_logits if hasattr(out, "class_logits") else out
            if logits is None:
                raise ValueError("model has no classification head")
            model.zero_grad(set_to_none=True)
            logits[0, target].backward()
        if act.dim() != 4:
            raise LayerError(f"layer {name!r} is not spatial (activation shape {tuple(act.shape)})")
        grad = act.grad.detach()
        alpha = grad.mean(dim=(2, 3), keepdim=True)
        raw = F.relu((alpha * act.detach()).sum(dim=1, keepdim=True))
        up = F.interpolate(raw, size=x.shape[-2:], mode="bilinear", align_corners=False)[0, 0]
    finally:
        model.zero_grad(set_to_none=True)
        model.train(was_training)
    up = up.clamp_min(0).double().numpy()
    peak = up.max()
    values = up / peak if peak > 0 else np.zeros_like(up)
    return Heatmap(np.clip(values, 0.0, 1.0), name, target)


@torch.no_grad()
def feature_maps(model: nn.Module, image, layer_name: str | None = None) -> np.ndarray:
    """Raw activations (C x h x w) of ``layer_name`` for one image."""
    _, layer = resolve_layer(model, layer_name)
    was_training = model.training
    model.eval()
    try:
        _, act = _capture(model, layer, _as_batch(image), keep_grad=False)
    finally:
        model.train(was_training)
    if act.dim() != 4:
        raise LayerError(f"layer activation is not spatial: shape {tuple(act.shape)}")
    return act[0].double().numpy()


def feature_grid(maps: np.ndarray, ncols: int | None = None, pad: int = 1) -> np.ndarray:
    """Tile maps into one uint8 image, each map min-max normalised on its own."""
    c, h, w = maps.shape
    ncols = ncols or math.ceil(math.sqrt(c))
    nrows = math.ceil(c / ncols)
    grid = np.zeros((nrows * (h + pad) - pad, ncols * (w + pad) - pad), dtype=np.uint8)
    for i, m in enumerate(maps):
        lo, hi = m.min(), m.max()
        tile = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
        r, col = divmod(i, ncols)
        grid[r * (h + pad):r * (h + pad) + h, col * (w + pad):col * (w + pad) + w] = np.round(tile * 255)
    return grid


def save_feature_maps(maps: np.ndarray, stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(feature_grid(maps)).save(stem.with_suffix(".png"))
    np.save(stem.with_suffix(".npy"), maps)
    return stem.with_suffix(".png"), stem.with_suffix(".npy")


# --------------------------------------------------------------------------- embeddings


@dataclass
class EmbeddingDump:
    ids: list[str]
    features: np.ndarray  # N x d
    labels: list[int]
    meta: dict = field(default_factory=dict)

    def to_csv(self, path: str | Path) -> None:
        d = self.features.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "label", *(f"f{j}" for j in range(d))])
            for rid, y, row in zip(self.ids, self.labels, self.features):
                w.writerow([rid, y, *(repr(float(v)) for v in row)])

    @classmethod
    def from_csv(cls, path: str | Path) -> EmbeddingDump:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        body = rows[1:]
        feats = np.array([[float(v) for v in r[2:]] for r in body]).reshape(len(body), len(rows[0]) - 2)
        return cls([r[0] for r in body], feats, [int(r[1]) for r in body])

    def class_similarity(self) -> tuple[float, float]:
        """Mean cosine similarity within classes and across classes (self-pairs excluded)."""
        f = self.features / np.maximum(np.linalg.norm(self.features, axis=1, keepdims=True), 1e-12)
        sim = f @ f.T
        y = np.asarray(self.labels)
        same = y[:, None] == y[None, :]
        off = ~np.eye(len(y), dtype=bool)
        return float(sim[same & off].mean()), float(sim[~same].mean())


@torch.no_grad()
def export_embeddings(model: nn.Module, images, ids, labels, layer_name: str | None = None,
                      batch_size: int = 32, meta: dict | None = None) -> EmbeddingDump:
    """Spatially pooled activations of ``layer_name`` (default: last encoder stage), one row per image."""
    if len(images) == 0:
        raise ValueError("no images to embed")
    name, layer = resolve_layer(model, layer_name)
    was_training = model.training
    model.eval()
    rows = []
    try:
        for start in range(0, len(images), batch_size):
            x = torch.stack([_as_batch(im)[0] for im in images[start:start + batch_size]])
            _, act = _capture(model, layer, x, keep_grad=False)
            rows.append(act.mean(dim=(2, 3)) if act.dim() == 4 else act.flatten(1))
    finally:
        model.train(was_training)
    feats = torch.cat(rows).double().numpy()
    return EmbeddingDump(list(ids), feats, [int(y) for y in labels], {"layer": name, **(meta or {})})


class Reducer(Protocol):
    """Anything with ``fit_transform(X) -> N x 2`` (for example scikit-learn's TSNE)."""

    def fit_transform(self, features: np.ndarray) -> np.ndarray: ...


class PCAReducer:
    """Projection onto the top principal components; a dependency-free default reducer."""

    def __init__(self, n_components: int = 2):
        self.n_components = n_components

    def fit_transform(self, features: np.ndarray) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        x = x - x.mean(axis=0)
        _, _, vt = np.linalg.svd(x, full_matrices=False)
        comps = vt[:self.n_components]
        # sign convention: largest-magnitude loading positive, so output is reproducible
        signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
        out = x @ (comps * signs[:, None]).T
        if out.shape[1] < self.n_components:
            out = np.pad(out, ((0, 0), (0, self.n_components - out.shape[1])))
        return out


def reduce_embeddings(dump: EmbeddingDump, reducer: Reducer | None = None) -> np.ndarray:
    return np.asarray((reducer or PCAReducer()).fit_transform(dump.features))


# --------------------------------------------------------------------------- box sizes


@dataclass
class BoxDimStats:
    """Box side length ``sqrt(w h)`` at the reference resolution, grouped by class."""

    dims: dict[str, list[float]]
    rows: list[tuple[str, str, float]]  # (record id, class, dim)
    reference: int = 224

    def mean(self, cls: str) -> float:
        vals = self.dims.get(cls, [])
        return float(np.mean(vals)) if vals else float("nan")

    def histogram(self, cls: str, bins: int = 20, value_range: tuple[float, float] | None = None):
        vals = self.dims.get(cls, [])
        if value_range is None:
            value_range = (0.0, float(self.reference))
        return np.histogram(np.asarray(vals, dtype=float), bins=bins, range=value_range)

    def to_csv(self, path: str | Path, bins: int = 20) -> None:
        """Per-class histogram rows: ``class,bin_lo,bin_hi,count``, then ``class,mean,,n``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "bin_lo", "bin_hi", "count"])
            for cls in self.dims:
                counts, edges = self.histogram(cls, bins)
                for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                    w.writerow([cls, f"{lo:.4f}", f"{hi:.4f}", int(c)])
            w.writerow([])
            w.writerow(["class", "mean", "", "n"])
            for cls, vals in self.dims.items():
                w.writerow([cls, f"{self.mean(cls):.4f}", "", len(vals)])

    def rows_to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "class", "dim"])
            for rid, cls, d in self.rows:
                w.writerow([rid, cls, f"{d:.6f}"])


def box_dim_stats(records: list[ImageRecord], reference: int = 224) -> BoxDimStats:
    """Rescale each box to a ``reference`` x ``reference`` image and take ``sqrt(w h)``."""
    dims: dict[str, list[float]] = {name: [] for name in CLASS_NAMES}
    rows = []
    for r in records:
        h, w = r.pixels.shape[:2]
        cls = ClassLabel(r.label).display
        for b in r.boxes:
            d = math.sqrt((b.w * reference / w) * (b.h * reference / h))
            dims[cls].append(d)
            rows.append((r.id, cls, d))
    return BoxDimStats(dims, rows, reference)
