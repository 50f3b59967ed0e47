import json

import pytest

from cxrlab.config import (
    ConfigKeyError,
    ExperimentConfig,
    StageConfig,
    compat_hash,
    config_hash,
    dump_config,
    from_dict,
    load_config,
    full_scale_config,
    to_dict,
)


def test_round_trip(tmp_path):
    cfg = full_scale_config()
    dump_config(cfg, tmp_path / "c.json")
    back = load_config(tmp_path / "c.json", env={})
    assert back == cfg
    assert config_hash(back) == config_hash(cfg)


def test_partial_config_keeps_defaults(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"baseline": {"epochs": 3}}}))
    cfg = load_config(tmp_path / "c.json", env={})
    assert cfg.train.baseline.epochs == 3
    assert cfg.train.baseline.lr == ExperimentConfig().train.baseline.lr
    assert cfg.preproc.target_size == (64, 64)


def test_unknown_key_reports_dotted_path():
    with pytest.raises(ConfigKeyError, match=r"train\.multitask\.stage2"):
        from_dict(ExperimentConfig, {"train": {"multitask": {"stage2": {"epoch": 1}}}})
    with pytest.raises(ConfigKeyError, match="<root>"):
        from_dict(ExperimentConfig, {"trian": {}})


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        load_config("/nonexistent/cfg.json")


def test_seed_env_override():
    assert load_config(env={"CXRLAB_SEED": "17"}).train.seed == 17
    assert load_config(env={}).train.seed == 0


def test_hash_sensitivity():
    a, b = ExperimentConfig(), ExperimentConfig()
    assert config_hash(a) == config_hash(b) and len(config_hash(a)) == 16
    b.train.seed = 1
    assert config_hash(a) != config_hash(b)
    assert compat_hash(a) == compat_hash(b)
    b.model.backbone.feature_dim = 32
    assert compat_hash(a) != compat_hash(b)


def test_stage_validation():
    with pytest.raises(ValueError):
        StageConfig(epochs=0)
    with pytest.raises(ValueError):
        StageConfig(lr=1e-4, lr_min=1e-3)
    with pytest.raises(ValueError):
        StageConfig(schedule="step")
    with pytest.raises(ValueError):
        StageConfig(optimizer="sgd")


def test_full_scale_preset_values():
    cfg = full_scale_config()
    assert cfg.image_size == (224, 224)
    assert cfg.model.backbone.name == "denseNet121"
    assert cfg.train.baseline.batch_size == 16 and cfg.train.baseline.lr == 1e-3
    assert cfg.train.multitask.stage3.schedule == "cosine"
    assert cfg.train.multitask.finetune_loss.class_weights == (0.2, 0.2, 0.3, 0.3)
    assert to_dict(cfg)["pretext"]["center_size"] == [100, 100]
