"""
Shared fixtures: a tiny configuration that keeps every test in CPU seconds
"""

import numpy as np
import pytest

from src.cdira_model import CdiraModel
from src.config import RunConfig, build_config
from src.experiments import load_dataset

TINY = {
    "backbone.input_size": "16",
    "backbone.stage_widths": "4,8",
    "backbone.feature_channels": "8",
    "model.global_hidden": "8",
    "model.roi_dim": "8",
    "model.fused_hidden": "8",
    "model.route_hidden": "4",
    "model.domain_hidden": "16",
    "synth.image_size": "16",
    "synth.n_classes": "3",
    "synth.n_domains": "2",
    "synth.per_cell": "10",
    "synth.glyph_min": "3",
    "synth.glyph_max": "4",
    "synth.jitter": "1",
    "train.max_epochs": "3",
    "train.patience": "2",
    "train.batch_size": "16",
    "train.warmup_epochs": "1",
    "cluster.candidates": "2,3",
    "cluster.sample_size": "500",
    "eval.batch_size": "32",
    "eval.latency_runs": "3",
    "eval.latency_warmup": "1",
}


def tiny_config(**overrides: str) -> RunConfig:
    """TINY plus overrides given as backbone__input_size="32" style keywords"""
    values = dict(TINY)
    values.update({key.replace("__", "."): str(value) for key, value in overrides.items()})
    return build_config(values)


@pytest.fixture
def config() -> RunConfig:
    return tiny_config()


@pytest.fixture
def model(config) -> CdiraModel:
    return CdiraModel(config, n_classes=3, seed=0, n_domains=2)


@pytest.fixture
def images(config) -> np.ndarray:
    rng = np.random.default_rng(0)
    size = config.backbone.input_size
    return rng.uniform(0, 1, size=(6, size, size, 3)).astype(np.float32)


@pytest.fixture(scope="session")
def dataset():
    """Generated 3-class, 2-style task split 16/2/2 per class; treat as read-only"""
    return load_dataset(tiny_config())
