"""Classification metrics, confusion matrices and k-fold aggregation."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import CLASS_NAMES, ClassLabel, ImageRecord

logger = logging.getLogger(__name__)


@dataclass
class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class."""

    counts: np.ndarray
    class_names: list[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def normalized_rows(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True).astype(float)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)

    def to_csv(self, path: str | Path, normalized: bool = False) -> None:
        data = self.normalized_rows() if normalized else self.counts
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["true\\pred", *self.class_names])
            for name, row in zip(self.class_names, data):
                w.writerow([name, *(f"{v:.6f}" if normalized else int(v) for v in row)])


@dataclass
class MetricsReport:
    f1_macro: float
    accuracy: float  # percent
    per_class: list[dict]
    confusion: ConfusionMatrix
    positive_f1: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "f1_macro": self.f1_macro,
            "accuracy": self.accuracy,
            "per_class": self.per_class,
            "confusion": {"class_names": self.confusion.class_names,
                          "counts": self.confusion.counts.tolist()},
        }
        if self.positive_f1 is not None:
            d["positive_f1"] = self.positive_f1
        d.update(self.extra)
        return d

    def to_json(self, path: str | Path, **extra) -> None:
        with open(path, "w") as fh:
            json.dump({**self.to_dict(), **extra}, fh, indent=2, sort_keys=True)
            fh.write("\n")


def confusion(preds, labels, num_classes: int = 4, class_names: list[str] | None = None) -> ConfusionMatrix:
    preds = np.asarray([int(p) for p in preds], dtype=np.int64)
    labels = np.asarray([int(t) for t in labels], dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.size} predictions for {labels.size} labels")
    if preds.size == 0:
        raise ValueError("nothing to evaluate")
    if preds.min() < 0 or labels.min() < 0 or max(preds.max(), labels.max()) >= num_classes:
        raise ValueError(f"class indices must be in [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    if class_names is None:
        class_names = CLASS_NAMES if num_classes == 4 else [str(i) for i in range(num_classes)]
    return ConfusionMatrix(counts, list(class_names))


def metrics_from_confusion(cm: ConfusionMatrix, positive: int | None = None) -> MetricsReport:
    """Per-class precision/recall/F1 (0/0 -> 0) and macro-F1 over all classes.

    Macro-F1 always divides by the full class count, so a class that is never
    present nor predicted contributes an F1 of 0.
    """
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    pred_tot = c.sum(axis=0)
    true_tot = c.sum(axis=1)
    precision = np.divide(tp, pred_tot, out=np.zeros_like(tp), where=pred_tot > 0)
    recall = np.divide(tp, true_tot, out=np.zeros_like(tp), where=true_tot > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    per_class = [
        {"name": n, "precision": float(p), "recall": float(r), "f1": float(f), "support": int(s)}
        for n, p, r, f, s in zip(cm.class_names, precision, recall, f1, true_tot)
    ]
    acc = 100.0 * tp.sum() / c.sum()
    pos_f1 = float(f1[positive]) if positive is not None else None
    return MetricsReport(float(f1.mean()), float(acc), per_class, cm, pos_f1)


def metrics(preds, labels, num_classes: int = 4, class_names=None, positive: int | None = None) -> MetricsReport:
    return metrics_from_confusion(confusion(preds, labels, num_classes, class_names), positive)


@dataclass
class KFoldSummary:
    mean_f1: float
    std_f1: float
    mean_acc: float
    std_acc: float
    per_fold: list[MetricsReport]

    @property
    def f1_text(self) -> str:
        return f"{self.mean_f1:.4f} ± {self.std_f1:.4f}"

    @property
    def acc_text(self) -> str:
        return f"{self.mean_acc:.2f} ± {self.std_acc:.2f}"

    def to_dict(self) -> dict:
        return {
            "mean_f1": self.mean_f1, "std_f1": self.std_f1,
            "mean_acc": self.mean_acc, "std_acc": self.std_acc,
            "f1": self.f1_text, "accuracy": self.acc_text,
            "per_fold": [r.to_dict() for r in self.per_fold],
        }


def kfold_summary(reports: list[MetricsReport]) -> KFoldSummary:
    """Mean and population standard deviation (ddof=0) over folds."""
    if len(reports) < 2:
        raise ValueError("need at least two fold reports")
    f1 = np.array([r.f1_macro for r in reports])
    acc = np.array([r.accuracy for r in reports])
    return KFoldSummary(float(f1.mean()), float(f1.std()), float(acc.mean()), float(acc.std()), list(reports))


# --------------------------------------------------------------------------- binary ablations

# pair name -> (positive classes, negative classes); the first-named side is positive
PAIRS: dict[str, tuple[tuple[ClassLabel, ...], tuple[ClassLabel, ...]]] = {
    "typical-indeterminate": ((ClassLabel.TYPICAL,), (ClassLabel.INDETERMINATE,)),
    "atypical-indeterminate": ((ClassLabel.ATYPICAL,), (ClassLabel.INDETERMINATE,)),
    "typical-atypical": ((ClassLabel.TYPICAL,), (ClassLabel.ATYPICAL,)),
    "positive-negative": (
        (ClassLabel.TYPICAL, ClassLabel.INDETERMINATE, ClassLabel.ATYPICAL),
        (ClassLabel.NEGATIVE,),
    ),
}


def binary_relabel(records: list[ImageRecord], pair: str) -> tuple[list[ImageRecord], list[int]]:
    """Keep the records of ``pair`` and return them with 1 = positive, 0 = negative labels."""
    pos, neg = PAIRS[pair]
    kept, labels = [], []
    for r in records:
        if r.label in pos:
            kept.append(r)
            labels.append(1)
        elif r.label in neg:
            kept.append(r)
            labels.append(0)
    return kept, labels


def pairwise_ablation(train_fn, train_records, test_records, pairs=None) -> dict[str, MetricsReport]:
    """Train a fresh binary classifier per class pair and report its test metrics.

    ``train_fn(records, labels, num_classes)`` must return a predictor
    ``predict(records) -> list[int]``; the recipe details live with the caller.
    The report's ``positive_f1`` is the binary F1 of the positive (first-named)
    class; ``f1_macro`` is the two-class macro.
    """
    pairs = list(PAIRS) if pairs is None else list(pairs)
    table = {}
    for pair in pairs:
        if pair not in PAIRS:
            raise ValueError(f"unknown pair {pair!r}; expected one of {list(PAIRS)}")
        tr, tr_y = binary_relabel(train_records, pair)
        te, te_y = binary_relabel(test_records, pair)
        if len(set(tr_y)) < 2 or len(set(te_y)) < 2:
            logger.warning("pair %s: a class is empty after filtering, skipped", pair)
            continue
        predict = train_fn(tr, tr_y, 2)
        preds = predict(te)
        names = ["negative", "positive"] if pair == "positive-negative" else [pair.split("-")[1], pair.split("-")[0]]
        table[pair] = metrics(preds, te_y, num_classes=2, class_names=names, positive=1)
    return table


def ablation_rows(table: dict[str, MetricsReport]) -> list[dict]:
    return [
        {"pair": pair, "f1": r.positive_f1, "f1_macro": r.f1_macro, "accuracy": r.accuracy}
        for pair, r in table.items()
    ]

