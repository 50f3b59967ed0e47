"""Acceptance criteria AC1-AC10; the terminal summary prints one PASS/FAIL line for each."""

import json
import math
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from cxrlab.cli import load_records, main, split_records
from cxrlab.config import ExperimentConfig, dump_config
from cxrlab.dataset import ClassLabel, boxes_to_mask
from cxrlab.evaluation import kfold_summary, metrics
from cxrlab.interpret import grad_cam
from cxrlab.losses import CompoundLossConfig, dice_wce, info_nce, weighted_cross_entropy
from cxrlab.models import MomentumPair, TinyCNN
from cxrlab.pretext import center_mask, make_inpaint_sample, targeted_lung_masks
from cxrlab.training import build_momentum_pair, model_from_checkpoint, moco_optimizer
from cxrlab.transforms import histogram_equalize, normalize01, preprocess, winsorize

from _helpers import small_cfg
from test_evaluation import brute_force, fake_report
from test_interpret import Toy, constant_toy
from test_losses import gradient_cases, max_rel_error, oracle_dice, oracle_info_nce, oracle_wce, random_instance
from test_transforms import cdf_oracle, rank_value

LN4 = math.log(4)


# --------------------------------------------------------------------------- AC1


@pytest.mark.ac(1)
def test_ac1_finite_difference_suite():
    start = time.perf_counter()
    counts, worst = {}, {}
    for name, _, fn, x in gradient_cases():
        err = max_rel_error(fn, x)
        counts[name] = counts.get(name, 0) + 1
        worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - start
    assert all(c >= 20 for c in counts.values()), counts
    assert {n.split("/")[0] for n in counts} == {"weighted_cross_entropy", "dice_loss", "dice_wce",
                                                  "info_nce", "masked_mse"}
    assert max(worst.values()) < 1e-4, worst
    assert elapsed < 60


# --------------------------------------------------------------------------- AC2


@pytest.mark.ac(2)
def test_ac2_compound_loss_oracle():
    rng = np.random.default_rng(20)
    cfg = CompoundLossConfig()
    for _ in range(20):
        logits, labels, seg, gt = random_instance(rng)
        expected = (cfg.w_ce * oracle_wce(logits.tolist(), labels.tolist(), cfg.class_weights)
                    + cfg.w_dice * oracle_dice(seg.flatten().tolist(), gt.flatten().tolist(), cfg.smoothing_eps))
        assert abs(dice_wce(logits, labels, seg, gt, cfg).item() - expected) < 1e-6
        ce_only = CompoundLossConfig(w_ce=1.0, w_dice=0.0, class_weights=cfg.class_weights)
        assert abs(dice_wce(logits, labels, seg, gt, ce_only).item()
                   - weighted_cross_entropy(logits, labels, cfg.class_weights).item()) < 1e-6
    unit = CompoundLossConfig(w_ce=1.0, w_dice=0.0, class_weights=(1.0,) * 4)
    _, labels, seg, gt = random_instance(rng)
    assert abs(dice_wce(torch.zeros(3, 4), labels, seg, gt, unit).item() - LN4) < 1e-6


# --------------------------------------------------------------------------- AC3


@pytest.mark.ac(3)
def test_ac3_info_nce_oracle():
    q = torch.tensor([1.0, 0.0], dtype=torch.float64)
    assert abs(info_nce(q, q, torch.tensor([[0.0, 1.0]], dtype=torch.float64), 1.0).item()
               + math.log(math.e / (math.e + 1))) < 1e-6
    rng = np.random.default_rng(30)
    for _ in range(20):
        d, k, tau = 8, 12, float(rng.uniform(0.05, 1.0))
        qv, kv = (F.normalize(torch.tensor(rng.normal(size=d)), dim=0) for _ in range(2))
        queue = F.normalize(torch.tensor(rng.normal(size=(k, d))), dim=1)
        got = info_nce(qv, kv, queue, tau).item()
        # (K+1)-way cross-entropy with the positive at index 0
        logits = torch.cat([(qv @ kv).view(1), queue @ qv]) / tau
        ce = F.cross_entropy(logits.view(1, -1), torch.tensor([0])).item()
        assert abs(got - ce) < 1e-6
        assert abs(got - oracle_info_nce(qv.tolist(), kv.tolist(), queue.tolist(), tau)) < 1e-6
    rot = torch.tensor(np.linalg.qr(rng.normal(size=(16, 16)))[0])
    qb = F.normalize(torch.tensor(rng.normal(size=(4, 16))), dim=1)
    kb = F.normalize(torch.tensor(rng.normal(size=(4, 16))), dim=1)
    nb = F.normalize(torch.tensor(rng.normal(size=(32, 16))), dim=1)
    assert abs(info_nce(qb, kb, nb, 0.2).item() - info_nce(qb @ rot.T, kb @ rot.T, nb @ rot.T, 0.2).item()) < 1e-5


# --------------------------------------------------------------------------- AC4


@pytest.mark.ac(4)
def test_ac4_mask_geometry():
    rng = np.random.default_rng(40)
    for _ in range(10_000):
        for m in targeted_lung_masks((224, 224), (17, 32), rng):
            assert 17 <= m.w <= 32 and 17 <= m.h <= 32
            assert 34 <= m.y and m.y + m.h - 1 <= 179
            assert 23 <= m.x and m.x + m.w - 1 <= 201
    c = center_mask((224, 224))
    assert (c.x, c.y, c.w, c.h) == (62, 62, 100, 100)
    img = rng.random((224, 224)).astype(np.float32)
    s = make_inpaint_sample(img, list(targeted_lung_masks((224, 224), (17, 32), rng)))
    inside = s.loss_mask.astype(bool)
    np.testing.assert_array_equal(s.input[~inside], img[~inside])
    np.testing.assert_array_equal(np.where(inside, s.target, s.input), img)


# --------------------------------------------------------------------------- AC5


def _perturb(params):
    with torch.no_grad():
        for p in params:
            p.add_(torch.randn_like(p))


@pytest.mark.ac(5)
def test_ac5_momentum_edge_cases():
    torch.manual_seed(50)
    copy_pair = MomentumPair(TinyCNN(16), queue_size=8, momentum=0.0)
    _perturb(copy_pair.query_parameters())
    copy_pair.momentum_update()
    assert all(torch.equal(a, b) for a, b in zip(copy_pair.key_parameters(), copy_pair.query_parameters()))
    frozen = MomentumPair(TinyCNN(16), queue_size=8, momentum=1.0)
    _perturb(frozen.query_parameters())
    before = [p.clone() for p in frozen.key_parameters()]
    frozen.momentum_update()
    assert all(torch.equal(a, b) for a, b in zip(before, frozen.key_parameters()))


@pytest.mark.ac(5)
def test_ac5_queue_ring_buffer_and_optimizer():
    torch.manual_seed(51)
    pair = MomentumPair(TinyCNN(16), queue_size=10, momentum=0.9)
    oracle, ptr = [row.clone() for row in pair.queue], 0
    rng = np.random.default_rng(51)
    for _ in range(12):
        keys = F.normalize(torch.randn(int(rng.integers(1, 6)), 16), dim=1)
        for row in keys:
            oracle[ptr] = row
            ptr = (ptr + 1) % 10
        pair.enqueue(keys)
        assert torch.equal(pair.queue, torch.stack(oracle)) and int(pair.queue_ptr) == ptr
    cfg = small_cfg()
    moco = build_momentum_pair(cfg, "cxr")
    opt = moco_optimizer(moco, cfg.train.pretrain)
    in_opt = {id(p) for g in opt.param_groups for p in g["params"]}
    assert not in_opt & {id(p) for p in moco.key_parameters()}
    assert id(moco.queue) not in in_opt


@pytest.mark.ac(5)
def test_ac5_initial_loss_near_log_k_plus_one():
    torch.manual_seed(52)
    k, d = 256, 64
    pair = MomentumPair(TinyCNN(d), queue_size=k, temperature=0.2)
    q = F.normalize(torch.randn(32, d), dim=1)
    kp = F.normalize(torch.randn(32, d), dim=1)
    loss = info_nce(q, kp, pair.queue, pair.temperature).item()
    assert abs(loss - math.log(k + 1)) / math.log(k + 1) < 0.15, loss


# --------------------------------------------------------------------------- AC6


@pytest.mark.ac(6)
def test_ac6_metrics_oracle():
    rng = np.random.default_rng(60)
    for _ in range(100):
        n = int(rng.integers(1, 80))
        preds, labels = rng.integers(0, 4, n).tolist(), rng.integers(0, 4, n).tolist()
        rep = metrics(preds, labels)
        f1, acc, per = brute_force(preds, labels, 4)
        assert rep.f1_macro == f1 and rep.accuracy == acc
        assert [p["f1"] for p in rep.per_class] == per
    degenerate = metrics([0] * 20, [0] * 10 + [1] * 10, num_classes=2)
    assert degenerate.f1_macro == (2 / 3) / 2
    reps = [fake_report(float(rng.random()), float(100 * rng.random())) for _ in range(5)]
    summary = kfold_summary(reps)
    vals = [r.f1_macro for r in summary.per_fold]
    mean = sum(vals) / len(vals)
    std = math.sqrt(sum((v - mean) ** 2 for v in vals) / len(vals))
    assert summary.f1_text == f"{mean:.4f} ± {std:.4f}"


# --------------------------------------------------------------------------- AC7


@pytest.mark.ac(7)
def test_ac7_preprocessing_oracle():
    rng = np.random.default_rng(70)
    for _ in range(50):
        x = rng.integers(0, 4096, size=tuple(rng.integers(1, 40, size=2)))
        p = float(rng.choice([80.0, 92.5, 95.0, 99.0]))
        hi, lo = rank_value(x.ravel().tolist(), p), rank_value(x.ravel().tolist(), 100 - p)
        np.testing.assert_array_equal(winsorize(x, p), np.clip(x, lo, hi))
    for _ in range(10):
        y = normalize01(rng.normal(size=(9, 7)) * 50 + 3)
        assert y.min() == 0.0 and y.max() == 1.0
        img = rng.integers(0, 256, size=(20, 20)).astype(np.uint8)
        np.testing.assert_array_equal(histogram_equalize(img), cdf_oracle(img))


# --------------------------------------------------------------------------- AC8 / AC9 / AC10: desk-scale runs


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """Default configuration: 400 phantoms at 64x64, tinyCnn, CPU."""
    root = tmp_path_factory.mktemp("desk")
    timings, codes = {}, {}

    def run(name, *argv):
        t = time.perf_counter()
        codes[name] = main(list(argv))
        timings[name] = time.perf_counter() - t

    run("baseline", "train", "--mode", "baseline", "--out", str(root / "baseline"))
    run("multitask", "train", "--mode", "multitask", "--out", str(root / "multitask"))
    run("inpaint", "pretrain", "--method", "inpaint", "--out", str(root / "inpaint"))
    run("finetune", "train", "--init-from", str(root / "inpaint/inpaint.pt"), "--out", str(root / "finetune"))
    return root, timings, codes


def _f1(root, name):
    return json.loads((root / name / "metrics.json").read_text())["f1_macro"]


@pytest.mark.ac(8)
def test_ac8_desk_scale_end_to_end(desk_run):
    root, timings, codes = desk_run
    assert codes == dict.fromkeys(codes, 0), codes
    baseline, multitask, finetuned = _f1(root, "baseline"), _f1(root, "multitask"), _f1(root, "finetune")
    print(f"baseline {baseline:.4f} multitask {multitask:.4f} inpaint+finetune {finetuned:.4f} "
          f"time {sum(timings.values()):.0f}s {timings}")
    assert baseline >= 0.6
    assert multitask >= baseline - 0.05
    assert finetuned >= 0.5
    assert sum(timings.values()) < 600


@pytest.mark.ac(9)
def test_ac9_default_baseline_rerun_bit_identical(desk_run, tmp_path):
    root, _, _ = desk_run
    assert main(["train", "--mode", "baseline", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "baseline.pt").read_bytes() == (root / "baseline/baseline.pt").read_bytes()
    assert (tmp_path / "metrics.json").read_bytes() == (root / "baseline/metrics.json").read_bytes()


RECIPES = {
    "multitask": (["train", "--mode", "multitask"], "multitask.pt", "metrics.json"),
    "moco": (["pretrain", "--method", "moco"], "moco.pt", "moco.log.jsonl"),
    "inpaint": (["pretrain", "--method", "inpaint"], "inpaint.pt", "inpaint.log.jsonl"),
    "ablate": (["ablate", "--pairs", "positive-negative"], None, "ablation.json"),
}


@pytest.mark.ac(9)
@pytest.mark.parametrize("recipe", list(RECIPES))
def test_ac9_recipe_rerun_bit_identical(recipe, tmp_path):
    cfg = small_cfg(epochs=2)
    cfg.data.n, cfg.data.image_size = 40, 32
    dump_config(cfg, tmp_path / "cfg.json")
    argv, ckpt, report = RECIPES[recipe]
    for run in ("a", "b"):
        assert main(["--config", str(tmp_path / "cfg.json"), *argv, "--out", str(tmp_path / run)]) == 0
    names = [n for n in (ckpt, report) if n]
    for name in names:
        a, b = (tmp_path / "a" / name), (tmp_path / "b" / name)
        assert a.is_file(), sorted(p.name for p in (tmp_path / "a").iterdir())
        assert a.read_bytes() == b.read_bytes(), name


@pytest.mark.ac(10)
def test_ac10_heatmap_range_and_negative_contributions():
    assert not grad_cam(constant_toy(-1.5), np.ones((12, 12)), 2, "feat").values.any()
    np.testing.assert_array_equal(grad_cam(constant_toy(1.5), np.ones((12, 12)), 2, "feat").values, 1.0)
    rng = np.random.default_rng(100)
    model = Toy(8, seed=100)
    for t in range(4):
        v = grad_cam(model, rng.random((24, 24)), t, "feat").values
        assert v.min() >= 0.0 and v.max() <= 1.0 and (v.max() == 1.0 or not v.any())


@pytest.mark.ac(10)
def test_ac10_heatmap_concentrates_inside_typical_boxes(desk_run):
    root, _, codes = desk_run
    assert codes["baseline"] == 0
    cfg = ExperimentConfig()
    model, _ = model_from_checkpoint(root / "baseline/baseline.pt", cfg)
    _, test = split_records(cfg, load_records(cfg))
    wins = []
    for r in test:
        if r.label != ClassLabel.TYPICAL:
            continue
        img = preprocess(r.pixels, cfg.preproc)
        hm = grad_cam(model, img, ClassLabel.TYPICAL)
        inside, outside = hm.inside_outside(boxes_to_mask(r, img.shape).astype(bool))
        wins.append(inside > outside)
    print(f"inside > outside for {sum(wins)}/{len(wins)} typical test images")
    assert len(wins) >= 10
    assert sum(wins) / len(wins) >= 0.7
