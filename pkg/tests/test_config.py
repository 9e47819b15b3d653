import pytest

from portionnet.config import ModelConfig, RunConfig, TrainingConfig, load_run_config
from portionnet.errors import ConfigError


def test_defaults():
    tc = TrainingConfig()
    assert (tc.alpha, tc.epochs, tc.warmup_fraction) == (0.3, 25, 0.1)
    assert (tc.lr_encoders, tc.lr_heads, tc.clip_norm) == (1e-4, 5e-4, 1.0)
    assert tc.effective_batch == 64
    assert tc.task_weights.as_tuple() == (1.0, 0.1, 0.5)
    assert not tc.task_weights.gradnorm and tc.task_weights.gradnorm_alpha == 1.5
    assert (tc.label_smoothing, tc.huber_delta) == (0.05, 0.5)


def test_yaml_file_and_overrides(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("training:\n  alpha: 0.5\n  lr_heads: 5e-4\ndata:\n  class_count: 6\n")
    cfg = load_run_config(path, {"training.alpha": 0.0, "training.epochs": None})
    assert cfg.training.alpha == 0.0
    assert cfg.training.epochs == 25
    assert cfg.training.lr_heads == 5e-4
    assert cfg.model.class_count == 6


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("training:\n  alpah: 0.5\n")
    with pytest.raises(ConfigError, match="training.alpah"):
        load_run_config(path)


def test_invalid_kind_names_key():
    with pytest.raises(ConfigError, match="data.kinds"):
        load_run_config(None, {"data.kinds": ["box", "torus"]})


@pytest.mark.parametrize(
    "key,value",
    [("training.alpha", 1.5), ("training.epochs", 0), ("data.class_count", 13), ("data.n_points", 32),
     ("data.resolution", 16), ("training.task_weights.distill", -1)],
)
def test_out_of_range_values_rejected(key, value):
    with pytest.raises(ConfigError, match=key.split(".")[-1]):
        load_run_config(None, {key: value})


def test_missing_or_malformed_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_run_config(tmp_path / "nope.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("- just\n- a list\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_run_config(bad)


def test_model_class_count_must_match_data():
    with pytest.raises(Exception):
        RunConfig.model_validate({"data": {"class_count": 6}, "model": {"class_count": 12}})


def test_model_digest_tracks_architecture():
    a = ModelConfig()
    assert a.digest() == ModelConfig().digest()
    assert a.digest() != ModelConfig(adapter_hidden=256).digest()
    with pytest.raises(Exception):
        ModelConfig(feature_dim=250, attention_heads=8)


def test_configs_are_frozen():
    cfg = TrainingConfig()
    with pytest.raises(Exception):
        cfg.alpha = 0.9
