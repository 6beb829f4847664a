"""
Tests for config parsing, presets and hashing
"""

import pytest

from src.config import (
    PRESETS, ConfigError, RunConfig, build_config, describe_keys, load_config, parse_config_text, save_config
)


def test_defaults():
    config = build_config({})
    assert config.backbone.output_hw() == (8, 8)
    assert config.topk() == 7
    assert config.model.tau == 0.9
    assert config.train.lambda_reg == 0.01


def test_coercion_of_lists_bools_and_none():
    config = build_config({
        "cluster.candidates": "2, 3,5",
        "train.hflip": "true",
        "model.topk": "none",
        "eval.kinds": "blur,jpeg",
    })
    assert config.cluster.candidates == [2, 3, 5]
    assert config.train.hflip is True
    assert config.model.topk is None
    assert config.eval.kinds == ["blur", "jpeg"]


def test_explicit_topk():
    assert build_config({"model.topk": "5"}).topk() == 5


@pytest.mark.parametrize("overrides", [
    {"model.rank": "3"},
    {"nosection.x": "1"},
    {"model.tau": "0"},
    {"model.tau": "1.5"},
    {"train.patience": "9", "train.max_epochs": "3"},
    {"backbone.kernel_size": "4"},
    {"backbone.feature_channels": "32"},
    {"backbone.input_size": "128"},
    {"synth.glyph_min": "9", "synth.glyph_max": "8"},
    {"eval.routing_mode": "sometimes"},
    {"eval.loco_group": "tiny"},
])
def test_invalid_overrides(overrides):
    with pytest.raises(ConfigError):
        build_config(overrides)


def test_feature_map_too_small():
    with pytest.raises(ConfigError):
        build_config({"backbone.input_size": "8", "synth.image_size": "8"})


def test_parse_config_text():
    text = "# run\nmodel.tau = 0.8  # threshold\n\ntrain.seed=4\n"
    assert parse_config_text(text) == {"model.tau": "0.8", "train.seed": "4"}
    with pytest.raises(ConfigError):
        parse_config_text("model.tau 0.8")


def test_canonical_text_round_trip(tmp_path, config):
    path = tmp_path / "run.cfg"
    save_config(config, path)
    again = load_config(path)
    assert again == config
    assert again.config_hash() == config.config_hash()


def test_presets_and_extra_overrides():
    full = load_config("fullscale")
    assert full.backbone.input_size == 224
    assert full.train.lr == 1e-5
    assert load_config("default", {"train.seed": "3"}).train.seed == 3
    assert set(PRESETS) == {"default", "fullscale"}
    with pytest.raises(ConfigError):
        load_config("no/such/file.cfg")


def test_hashes():
    base = build_config({})
    assert base.config_hash() == RunConfig().config_hash()
    assert build_config({"train.seed": "1"}).config_hash() != base.config_hash()
    assert build_config({"train.seed": "1"}).model_hash() == base.model_hash()
    assert build_config({"model.global_hidden": "128"}).model_hash() != base.model_hash()


def test_describe_keys_lists_every_key():
    text = describe_keys()
    assert "model.tau=0.9" in text
    assert "[full-scale: 224]" in text
    assert len(text.splitlines()) == len(RunConfig().canonical_text().splitlines())
