from pathlib import Path

import pytest

from config import settings
from config.schema import describe_keys, load_config, parse_overrides, require_paths, resolve_config_path
from network.backbone import Modality
from network.fusion import FusionLevel
from utils.exceptions import ConfigError

TOY_CONFIG = Path(__file__).resolve().parents[1] / "config" / "toy.ini"


def _write(tmp_path, text):
    path = tmp_path / "mftrack.ini"
    path.write_text(text)
    return path


def test_defaults_without_file():
    config = load_config()
    assert config.backbone.block_channel_widths == settings.BLOCK_CHANNEL_WIDTHS
    assert config.train.search_size == settings.SEARCH_SIZE
    assert config.evaluation.vot_runs == settings.VOT_RUNS
    assert config.fusion.level is FusionLevel.FEATURE


def test_toy_config_loads():
    config = load_config(TOY_CONFIG)
    assert config.backbone.block_channel_widths == (8, 16, 32, 32)
    assert config.fusion.iou_input is Modality.FUSED
    assert config.tracker.search_size == 64
    assert config.data.train_root == "data/toy/train"


def test_ini_values_and_overrides(tmp_path):
    path = _write(tmp_path, "[train]\ntotal_steps = 10\nbatch_size = 3\n\n[fusion]\nlevel = response\n")
    config = load_config(path, ["train.total_steps=4", "backbone.block_strides=1, 2, 2, 2"])
    assert config.train.total_steps == 4
    assert config.train.batch_size == 3
    assert config.backbone.block_strides == (1, 2, 2, 2)
    assert config.fusion.level is FusionLevel.RESPONSE
    assert config.fusion.predictor_input is Modality.FUSED
    assert config.fusion.iou_input is Modality.RGB


def test_errors_are_collected(tmp_path):
    path = _write(tmp_path, "[train]\ntotal_steps = -1\n\n[tracker]\nsearch_size = wide\n\n[bogus]\nx = 1\n")
    with pytest.raises(ConfigError) as info:
        load_config(path, ["evaluation.unknown_key=3"])
    errors = info.value.errors
    assert len(errors) == 4
    assert "[bogus] unknown section" in errors
    assert any(e.startswith("[train] total_steps") for e in errors)
    assert any(e.startswith("[tracker] search_size") for e in errors)
    assert any(e.startswith("[evaluation] unknown_key") for e in errors)


def test_train_seed_follows_general_seed(tmp_path):
    path = _write(tmp_path, "[general]\nseed = 7\n")
    assert load_config(path).train.seed == 7
    assert load_config(path, ["train.seed=3"]).train.seed == 3
    assert load_config(path, ["general.seed=11"]).train.seed == 11
    assert load_config().train.seed == 0


def test_invalid_fusion_routing_is_a_config_error():
    with pytest.raises(ConfigError):
        load_config(overrides=["fusion.level=single_rgb", "fusion.iou_input=tir"])


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.ini")


@pytest.mark.parametrize("item", ["train.total_steps", "total_steps=3", ".x=1", "train.=1"])
def test_malformed_override(item):
    with pytest.raises(ConfigError):
        parse_overrides([item])


def test_resolve_config_path(monkeypatch):
    monkeypatch.delenv(settings.CONFIG_ENV_VAR, raising=False)
    assert resolve_config_path(None) is None
    monkeypatch.setenv(settings.CONFIG_ENV_VAR, "from_env.ini")
    assert resolve_config_path(None) == Path("from_env.ini")
    assert resolve_config_path("explicit.ini") == Path("explicit.ini")


def test_describe_keys():
    text = describe_keys(["train", "tracker"])
    lines = text.splitlines()
    assert lines[0].startswith("[train] stage, n_frames")
    assert "total_steps" in lines[0]
    assert lines[1].startswith("[tracker]")


def test_require_paths(tmp_path):
    require_paths([("here", str(tmp_path)), ("unset", None)])
    with pytest.raises(ConfigError) as info:
        require_paths([("train root", str(tmp_path / "missing")), ("here", str(tmp_path))])
    assert info.value.errors == [f"Path does not exist (train root: {tmp_path / 'missing'})"]
