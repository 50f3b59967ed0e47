import csv
import json

import pytest

from cxrlab.cli import main
from cxrlab.config import dump_config
from cxrlab.models import Classifier, TinyCNN, save_checkpoint

from _helpers import small_cfg


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    cfg = small_cfg(epochs=1)
    cfg.data.n, cfg.data.image_size = 40, 32
    cfg.interpret.limit = 3
    path = tmp_path_factory.mktemp("cfg") / "small.json"
    dump_config(cfg, path)
    return str(path)


@pytest.fixture(scope="module")
def baseline_run(cfg_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("baseline")
    assert main(["--config", cfg_path, "train", "--mode", "baseline", "--out", str(out)]) == 0
    return out


# --------------------------------------------------------------------------- synth


def test_synth_writes_images_and_manifest(tmp_path, capsys):
    assert main(["synth", "--n", "8", "--size", "64", "--seed", "1", "--out", str(tmp_path)]) == 0
    assert len(list((tmp_path / "images").glob("*.png"))) == 8
    rows = list(csv.DictReader(open(tmp_path / "manifest.csv")))
    assert len(rows) == 8
    text = capsys.readouterr().out
    for name in ("negative", "typical", "indeterminate", "atypical"):
        assert f"{name}: 2" in text


def test_synth_same_seed_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert main(["synth", "--n", "8", "--size", "32", "--seed", "5", "--out", str(tmp_path / d)]) == 0
    names = sorted(p.name for p in (tmp_path / "a/images").iterdir())
    assert names
    for name in names:
        assert (tmp_path / "a/images" / name).read_bytes() == (tmp_path / "b/images" / name).read_bytes()
    assert (tmp_path / "a/manifest.csv").read_bytes() == (tmp_path / "b/manifest.csv").read_bytes()


def test_synth_usage_errors(tmp_path, capsys):
    assert main(["synth", "--n", "3", "--out", str(tmp_path)]) == 2
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["synth", "--n", "8", "--out", str(blocker / "sub")]) == 2
    assert "not writable" in capsys.readouterr().err


def test_config_errors(tmp_path):
    assert main(["--config", str(tmp_path / "missing.json"), "synth", "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"baseline": {"epoch": 1}}}))
    assert main(["--config", str(bad), "train", "--out", str(tmp_path / "o")]) == 2
    assert main(["pretrain", "--method", "rotation", "--out", str(tmp_path)]) == 2
    assert main([]) == 2


# --------------------------------------------------------------------------- pretrain


def test_pretrain_inpaint_center(cfg_path, tmp_path):
    out = tmp_path / "inp"
    assert main(["--config", cfg_path, "pretrain", "--method", "inpaint", "--mask-mode", "center",
                 "--out", str(out)]) == 0
    assert (out / "inpaint.pt").is_file()
    lines = [json.loads(l) for l in (out / "inpaint.log.jsonl").read_text().splitlines()]
    assert lines and all("maskedMse" in l for l in lines)
    assert lines[0]["mask_mode"] == "center"


def test_pretrain_moco_modified_tau(cfg_path, tmp_path):
    out = tmp_path / "moco"
    assert main(["--config", cfg_path, "pretrain", "--method", "moco", "--variant", "cxrModified",
                 "--out", str(out)]) == 0
    logs = list(out.glob("*.log.jsonl"))
    assert len(logs) == 1
    first = json.loads(logs[0].read_text().splitlines()[0])
    assert first["tau"] == 0.07 and first["variant"] == "cxrModified"


# --------------------------------------------------------------------------- train / eval


def test_train_baseline_metrics(baseline_run):
    data = json.loads((baseline_run / "metrics.json").read_text())
    assert 0.0 <= data["f1_macro"] <= 1.0
    assert (baseline_run / "baseline.pt").is_file()
    assert (baseline_run / "metrics_confusion.csv").is_file()


def test_train_kfold_summary(cfg_path, tmp_path, capsys):
    out = tmp_path / "kf"
    assert main(["--config", cfg_path, "train", "--kfold", "3", "--out", str(out)]) == 0
    assert len(list(out.glob("fold*/metrics.json"))) == 3
    summary = json.loads((out / "kfold_summary.json").read_text())
    folds = [json.loads((out / f"fold{i}/metrics.json").read_text())["f1_macro"] for i in range(3)]
    mean = sum(folds) / 3
    std = (sum((f - mean) ** 2 for f in folds) / 3) ** 0.5
    assert summary["f1"] == f"{mean:.4f} ± {std:.4f}"
    assert "F1 " in capsys.readouterr().out


def test_train_multitask_skip_stage1(cfg_path, tmp_path):
    out = tmp_path / "mt"
    assert main(["--config", cfg_path, "train", "--mode", "multitask", "--skip-stage1", "--out", str(out)]) == 0
    assert not (out / "stage1.pt").exists() and (out / "stage2.pt").is_file()
    assert (out / "multitask.pt").is_file()


def test_train_incompatible_init_exits_3(cfg_path, tmp_path, capsys):
    ckpt = tmp_path / "wide.pt"
    save_checkpoint(ckpt, Classifier(TinyCNN(32)).state_dict(), {"stage": "baseline", "compat_hash": "other"})
    assert main(["--config", cfg_path, "train", "--init-from", str(ckpt), "--out", str(tmp_path / "o")]) == 3
    err = capsys.readouterr().err
    assert "block4.0.weight: checkpoint (32, 24, 3, 3) vs model (16, 12, 3, 3)" in err
    assert main(["--config", cfg_path, "train", "--init-from", str(tmp_path / "none.pt"),
                 "--out", str(tmp_path / "o")]) == 3
    assert "error" in capsys.readouterr().err


def test_eval_twice_identical(cfg_path, baseline_run, tmp_path):
    ckpt = str(baseline_run / "baseline.pt")
    for d in ("a", "b"):
        assert main(["--config", cfg_path, "eval", "--checkpoint", ckpt, "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a/eval.json").read_bytes() == (tmp_path / "b/eval.json").read_bytes()
    assert main(["--config", cfg_path, "eval", "--checkpoint", str(tmp_path / "x.pt"),
                 "--out", str(tmp_path / "c")]) == 3


def test_ablate_all_pairs(cfg_path, tmp_path):
    out = tmp_path / "abl"
    assert main(["--config", cfg_path, "ablate", "--pairs", "all", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    assert len(rows) == 4
    assert main(["--config", cfg_path, "ablate", "--pairs", "foo-bar", "--out", str(out)]) == 2


# --------------------------------------------------------------------------- interpret and verify


def test_interpret_gradcam_one_png_per_input(cfg_path, baseline_run, tmp_path):
    out = tmp_path / "gc"
    assert main(["--config", cfg_path, "interpret", "gradcam", "--class", "typical",
                 "--checkpoint", str(baseline_run / "baseline.pt"), "--out", str(out)]) == 0
    assert len(list(out.glob("gradcam_*.png"))) == 3
    assert len(list(out.glob("gradcam_*.npy"))) == 3


def test_interpret_other_outputs(cfg_path, baseline_run, tmp_path):
    ckpt = str(baseline_run / "baseline.pt")
    out = tmp_path / "i"
    assert main(["--config", cfg_path, "interpret", "features", "--checkpoint", ckpt, "--limit", "2",
                 "--out", str(out)]) == 0
    assert len(list(out.glob("features_*.png"))) == 2
    assert main(["--config", cfg_path, "interpret", "embeddings", "--checkpoint", ckpt, "--out", str(out)]) == 0
    assert (out / "embeddings.csv").read_text().startswith("id,label,f0")
    assert main(["--config", cfg_path, "interpret", "boxstats", "--out", str(out)]) == 0
    assert (out / "box_dims_hist.csv").is_file()
    assert main(["--config", cfg_path, "interpret", "gradcam", "--layer", "encoder.nope",
                 "--checkpoint", ckpt, "--out", str(out)]) == 3


def test_verify_matches_and_mismatches(cfg_path, baseline_run, tmp_path):
    resolved = str(baseline_run / "config.json")
    for artifact in ("metrics.json", "baseline.pt", "baseline.log.jsonl", "metrics_confusion.csv"):
        assert main(["--config", resolved, "--verify", str(baseline_run / artifact)]) == 0, artifact
    other = json.loads(open(resolved).read())
    other["train"]["seed"] = 99
    (tmp_path / "other.json").write_text(json.dumps(other))
    assert main(["--config", str(tmp_path / "other.json"), "--verify", str(baseline_run / "metrics.json")]) == 3


def test_seed_env_override_changes_hash(cfg_path, baseline_run, monkeypatch):
    monkeypatch.setenv("CXRLAB_SEED", "7")
    assert main(["--config", str(baseline_run / "config.json"), "--verify",
                 str(baseline_run / "metrics.json")]) == 3
