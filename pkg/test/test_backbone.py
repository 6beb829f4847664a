"""
Tests for the convolutional feature extractor
"""

import numpy as np
import pytest

from src.autodiff import ShapeError, Tensor, gap, grad_check, mean
from src.backbone import MEAN_KEY, STD_KEY, extract_features, fit_normalization, init_backbone, output_shape
from src.config import build_config


def test_default_config_gives_64_by_8_by_8():
    config = build_config({})
    params = init_backbone(config.backbone, np.random.default_rng(0))
    images = np.random.default_rng(1).uniform(size=(2, 64, 64, 3)).astype(np.float32)
    f = extract_features(images, params, config.backbone)
    assert f.shape == (2, 64, 8, 8)
    assert output_shape(config.backbone) == (64, 8, 8)


def test_zero_image_gives_zero_map(config):
    params = init_backbone(config.backbone, np.random.default_rng(0))
    f = extract_features(np.zeros((16, 16, 3), dtype=np.float32), params, config.backbone)
    assert f.shape == (1, 8, 4, 4)
    assert not f.data.any()


def test_same_seed_same_map(config, images):
    a = init_backbone(config.backbone, np.random.default_rng(3))
    b = init_backbone(config.backbone, np.random.default_rng(3))
    np.testing.assert_array_equal(
        extract_features(images, a, config.backbone).data,
        extract_features(images, b, config.backbone).data
    )


def test_feature_map_is_non_negative(config, images):
    params = init_backbone(config.backbone, np.random.default_rng(0))
    assert (extract_features(images, params, config.backbone).data >= 0).all()


@pytest.mark.parametrize("shape", [(16, 16), (2, 16, 16, 1), (2, 8, 8, 3), (2, 3, 16, 16)])
def test_wrong_image_shape(config, shape):
    params = init_backbone(config.backbone, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        extract_features(np.zeros(shape, dtype=np.float32), params, config.backbone)


def test_fit_normalization_writes_buffers(config, images):
    params = init_backbone(config.backbone, np.random.default_rng(0))
    fit_normalization(params, images)
    np.testing.assert_allclose(params[MEAN_KEY].data, images.reshape(-1, 3).mean(axis=0), rtol=1e-5)
    np.testing.assert_allclose(params[STD_KEY].data, images.reshape(-1, 3).std(axis=0), rtol=1e-4)
    assert not params[MEAN_KEY].requires_grad


def test_fit_normalization_constant_channel_keeps_unit_std(config):
    params = init_backbone(config.backbone, np.random.default_rng(0))
    fit_normalization(params, np.full((3, 16, 16, 3), 0.25, dtype=np.float32))
    np.testing.assert_array_equal(params[STD_KEY].data, np.ones(3, dtype=np.float32))
    with pytest.raises(ShapeError):
        fit_normalization(params, np.zeros((0, 16, 16, 3)))


def test_first_layer_gradient(config):
    # 8x8 input keeps the finite-difference loop short
    small = build_config({
        "backbone.input_size": "8", "backbone.stage_widths": "2,3", "backbone.feature_channels": "3",
        "synth.image_size": "8", "synth.glyph_min": "2", "synth.glyph_max": "2", "synth.jitter": "0",
    })
    params = init_backbone(small.backbone, np.random.default_rng(5))
    image = np.random.default_rng(6).uniform(size=(1, 8, 8, 3)).astype(np.float32)

    def fn():
        return mean(gap(extract_features(image, params, small.backbone)))

    first = [params["backbone.s0.conv.w"], params["backbone.s0.conv.b"]]
    assert grad_check(fn, first, eps=1e-5) < 1e-2


def test_extract_features_accepts_plain_tensors(config, images):
    params = init_backbone(config.backbone, np.random.default_rng(0))
    assert isinstance(extract_features(images[0], params, config.backbone), Tensor)
