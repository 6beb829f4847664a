"""
Compact convolutional feature extractor
Three stages of (3x3 conv -> ReLU -> stride-2 3x3 conv -> ReLU), no batch-norm
"""

import logging
from typing import Dict, List, Mapping, Tuple

import numpy as np

from src.autodiff import DTYPE, ShapeError, Tensor, conv2d, relu
from src.config import BackboneConfig

logger = logging.getLogger(__name__)

MEAN_KEY = "input.mean"
STD_KEY = "input.std"


def kaiming_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def layer_names(config: BackboneConfig) -> List[Tuple[str, int, int, int]]:
    """(name, in_channels, out_channels, stride) for every conv layer in order"""
    layers = []
    in_channels = config.input_channels
    for stage, width in enumerate(config.stage_widths):
        layers.append((f"backbone.s{stage}.conv", in_channels, width, 1))
        layers.append((f"backbone.s{stage}.down", width, width, 2))
        in_channels = width
    return layers


def init_backbone(config: BackboneConfig, rng: np.random.Generator) -> Dict[str, Tensor]:
    """
    Seeded fan-in initialization of every conv layer

    Biases start at zero; the input normalization buffers start at mean 0, std 1
    and are refitted on the training split by fit_normalization.
    """
    k = config.kernel_size
    params: Dict[str, Tensor] = {}
    for name, c_in, c_out, _ in layer_names(config):
        fan_in = c_in * k * k
        params[f"{name}.w"] = Tensor(kaiming_uniform(rng, (c_out, c_in, k, k), fan_in), requires_grad=True, name=f"{name}.w")
        params[f"{name}.b"] = Tensor(np.zeros(c_out, dtype=DTYPE), requires_grad=True, name=f"{name}.b")
    params[MEAN_KEY] = Tensor(np.zeros(config.input_channels, dtype=DTYPE), name=MEAN_KEY)
    params[STD_KEY] = Tensor(np.ones(config.input_channels, dtype=DTYPE), name=STD_KEY)
    return params


def fit_normalization(params: Mapping[str, Tensor], images: np.ndarray):
    """Per-channel mean/std of the training images, written into the normalization buffers"""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ShapeError(f"expected a non-empty (N,H,W,C) image stack, got {images.shape}")
    flat = images.reshape(-1, images.shape[-1]).astype(np.float64)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    std = np.where(std < 1e-6, 1.0, std)
    params[MEAN_KEY].data = mean.astype(DTYPE)
    params[STD_KEY].data = std.astype(DTYPE)
    logger.debug("input normalization mean=%s std=%s", np.round(mean, 4), np.round(std, 4))


def output_shape(config: BackboneConfig) -> Tuple[int, int, int]:
    """(C_f, H, W) of the feature map for a given config"""
    height, width = config.output_hw()
    return config.feature_channels, height, width


def extract_features(images, params: Mapping[str, Tensor], config: BackboneConfig) -> Tensor:
    """
    Feature maps for a batch of images

    Args:
        images: (B, H, W, C) or (H, W, C) array with values in [0, 1]
        params: backbone weights plus the input normalization buffers
        config: backbone configuration the params were built for

    Returns:
        Tensor of shape (B, C_f, H', W')
    """
    array = np.asarray(images, dtype=DTYPE)
    if array.ndim == 3:
        array = array[None]
    expected = (config.input_size, config.input_size, config.input_channels)
    if array.ndim != 4 or array.shape[1:] != expected:
        raise ShapeError(f"images must be (B, {expected[0]}, {expected[1]}, {expected[2]}), got {array.shape}")

    normalized = (array - params[MEAN_KEY].data) / params[STD_KEY].data
    x = Tensor(np.ascontiguousarray(normalized.transpose(0, 3, 1, 2)))
    for name, _, _, stride in layer_names(config):
        x = relu(conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride, padding="same"))
    return x
