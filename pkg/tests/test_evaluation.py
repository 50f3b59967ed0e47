import csv
import json

import numpy as np
import pytest

from cxrlab.dataset import ClassLabel, ImageRecord
from cxrlab.evaluation import (
    PAIRS,
    ablation_rows,
    binary_relabel,
    confusion,
    kfold_summary,
    metrics,
    metrics_from_confusion,
    pairwise_ablation,
)


def brute_force(preds, labels, c):
    f1s = []
    for k in range(c):
        tp = sum(1 for p, t in zip(preds, labels) if p == k and t == k)
        fp = sum(1 for p, t in zip(preds, labels) if p == k and t != k)
        fn = sum(1 for p, t in zip(preds, labels) if p != k and t == k)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    acc = 100.0 * sum(p == t for p, t in zip(preds, labels)) / len(labels)
    return sum(f1s) / c, acc, f1s


def test_metrics_match_brute_force_on_100_vectors():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 60))
        preds = rng.integers(0, 4, size=n).tolist()
        labels = rng.integers(0, 4, size=n).tolist()
        rep = metrics(preds, labels)
        f1, acc, per = brute_force(preds, labels, 4)
        assert rep.f1_macro == f1
        assert rep.accuracy == acc
        assert [p["f1"] for p in rep.per_class] == per


def test_two_class_degenerate_is_one_third():
    rep = metrics([0] * 20, [0] * 10 + [1] * 10, num_classes=2)
    assert rep.accuracy == 50.0
    assert rep.f1_macro == (2 / 3 + 0) / 2
    assert abs(rep.f1_macro - 1 / 3) < 1e-15


def test_perfect_predictions():
    labels = [0, 1, 2, 3, 3, 1]
    rep = metrics(labels, labels)
    assert rep.f1_macro == 1.0 and rep.accuracy == 100.0
    assert np.count_nonzero(rep.confusion.counts - np.diag(np.diag(rep.confusion.counts))) == 0


def test_confusion_counting_oracle():
    rng = np.random.default_rng(1)
    preds = rng.integers(0, 4, 50)
    labels = rng.integers(0, 4, 50)
    cm = confusion(preds, labels)
    for t in range(4):
        for p in range(4):
            assert cm.counts[t, p] == sum(1 for a, b in zip(labels, preds) if a == t and b == p)
    assert cm.total == 50
    all_neg = confusion([0] * 8, [0, 1, 2, 3] * 2)
    assert np.count_nonzero(all_neg.counts.sum(axis=0)) == 1


def test_metrics_pure_in_confusion_and_order_invariant():
    rng = np.random.default_rng(2)
    preds, labels = rng.integers(0, 4, 40), rng.integers(0, 4, 40)
    a = metrics(preds, labels)
    b = metrics_from_confusion(confusion(preds, labels))
    perm = rng.permutation(40)
    c = metrics(preds[perm], labels[perm])
    assert a.f1_macro == b.f1_macro == c.f1_macro
    assert a.accuracy == b.accuracy == c.accuracy


def test_confusion_errors():
    with pytest.raises(ValueError):
        confusion([0, 1], [0])
    with pytest.raises(ValueError):
        confusion([], [])
    with pytest.raises(ValueError):
        confusion([4], [0])


def test_report_serialisation(tmp_path):
    rep = metrics([0, 1, 1, 3], [0, 1, 2, 3])
    rep.to_json(tmp_path / "m.json", run="x")
    data = json.loads((tmp_path / "m.json").read_text())
    assert data["f1_macro"] == rep.f1_macro and data["run"] == "x"
    rep.confusion.to_csv(tmp_path / "c.csv")
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == ["true\\pred", "negative", "typical", "indeterminate", "atypical"]
    assert rows[3][1:] == ["0", "1", "0", "0"]
    np.testing.assert_allclose(rep.confusion.normalized_rows().sum(axis=1), 1.0)


# --------------------------------------------------------------------------- k-fold


def fake_report(f1, acc):
    rep = metrics([0], [0])
    rep.f1_macro, rep.accuracy = f1, acc
    return rep


def test_kfold_two_point():
    s = kfold_summary([fake_report(0.4, 60), fake_report(0.5, 70)])
    assert s.mean_f1 == pytest.approx(0.45) and s.std_f1 == pytest.approx(0.05)
    assert s.f1_text == "0.4500 ± 0.0500" and s.acc_text == "65.00 ± 5.00"


def test_kfold_recomputable_from_folds():
    rng = np.random.default_rng(3)
    reps = [fake_report(float(rng.random()), float(100 * rng.random())) for _ in range(5)]
    s = kfold_summary(reps)
    f1 = [r.f1_macro for r in s.per_fold]
    mean = sum(f1) / 5
    std = (sum((v - mean) ** 2 for v in f1) / 5) ** 0.5
    assert s.f1_text == f"{mean:.4f} ± {std:.4f}"
    assert kfold_summary([fake_report(0.3, 50)] * 3).std_f1 == 0
    with pytest.raises(ValueError):
        kfold_summary([fake_report(0.3, 50)])


# --------------------------------------------------------------------------- pairwise ablation


def recs(labels):
    return [ImageRecord(f"r{i}", np.zeros((4, 4), np.uint8), ClassLabel(c)) for i, c in enumerate(labels)]


def test_binary_relabel():
    rs = recs([0, 1, 2, 3, 1])
    kept, y = binary_relabel(rs, "positive-negative")
    assert y == [0, 1, 1, 1, 1]
    kept, y = binary_relabel(rs, "typical-atypical")
    assert [r.label for r in kept] == [1, 3, 1] and y == [1, 0, 1]


def test_pairwise_ablation_with_oracle_predictor():
    train, test = recs([0, 1, 2, 3] * 3), recs([0, 1, 2, 3] * 2)

    def train_fn(records, labels, num_classes):
        assert num_classes == 2 and set(labels) == {0, 1}
        pair_pos = {r.label for r, y in zip(records, labels) if y == 1}
        return lambda rs: [int(r.label in pair_pos) for r in rs]

    table = pairwise_ablation(train_fn, train, test)
    assert list(table) == list(PAIRS)
    rows = ablation_rows(table)
    assert len(rows) == 4 and all(r["f1"] == 1.0 and r["accuracy"] == 100.0 for r in rows)


def test_pairwise_ablation_skips_empty_pairs(caplog):
    train, test = recs([0, 1, 1, 2]), recs([0, 1, 2])
    table = pairwise_ablation(lambda r, y, n: (lambda rs: [0] * len(rs)), train, test)
    assert "typical-atypical" not in table and "typical-indeterminate" in table
    assert "skipped" in caplog.text
    with pytest.raises(ValueError):
        pairwise_ablation(lambda *a: None, train, test, ["foo-bar"])
