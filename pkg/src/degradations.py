"""
Image degradations for robustness evaluation
blur, jpeg (block-DCT quantization proxy), lowlight and occlusion; severity 0 is the identity
"""

import math
from dataclasses import dataclass
from typing import Callable, Dict

import numpy as np
from scipy.fft import dctn, idctn
from scipy.ndimage import uniform_filter

from src.autodiff import CdiraError

OCCLUDER_GRAY = 0.5
JPEG_BLOCK = 8


class DegradationError(CdiraError, ValueError):
    """Unknown degradation kind or invalid severity"""


@dataclass(frozen=True)
class DegradeSpec:
    kind: str
    severity: int = 0
    seed: int = 0  # occlusion only


def box_blur(image: np.ndarray, severity: int, seed: int = 0) -> np.ndarray:
    size = 2 * severity + 1
    return uniform_filter(image, size=(size, size, 1), mode="nearest")


def jpeg_proxy(image: np.ndarray, severity: int, seed: int = 0) -> np.ndarray:
    """Quantize 8x8 orthonormal DCT coefficients with step 2*severity on the 0-255 scale"""
    step = 2.0 * severity
    height, width, channels = image.shape
    pad_h = (-height) % JPEG_BLOCK
    pad_w = (-width) % JPEG_BLOCK
    padded = np.pad(image.astype(np.float64) * 255.0, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    hb, wb = padded.shape[0] // JPEG_BLOCK, padded.shape[1] // JPEG_BLOCK
    blocks = padded.reshape(hb, JPEG_BLOCK, wb, JPEG_BLOCK, channels)
    coeffs = dctn(blocks, axes=(1, 3), norm="ortho")
    coeffs = np.round(coeffs / step) * step
    restored = idctn(coeffs, axes=(1, 3), norm="ortho").reshape(padded.shape)
    return np.clip(restored[:height, :width] / 255.0, 0.0, 1.0)


def lowlight(image: np.ndarray, severity: int, seed: int = 0) -> np.ndarray:
    return np.clip(image / (1.0 + severity), 0.0, 1.0)


def occlusion_box(height: int, width: int, severity: int, seed: int):
    """(y0, x0, h, w) of a gray rectangle covering 0.1 * severity of the frame"""
    fraction = min(1.0, 0.1 * severity)
    target = fraction * height * width
    rng = np.random.default_rng(seed)
    min_h = max(1, math.ceil(target / width))
    h = int(rng.integers(min_h, height + 1))
    w = int(min(width, max(1, round(target / h))))
    y0 = int(rng.integers(0, height - h + 1))
    x0 = int(rng.integers(0, width - w + 1))
    return y0, x0, h, w


def occlusion(image: np.ndarray, severity: int, seed: int = 0) -> np.ndarray:
    out = image.copy()
    y0, x0, h, w = occlusion_box(image.shape[0], image.shape[1], severity, seed)
    out[y0:y0 + h, x0:x0 + w] = OCCLUDER_GRAY
    return out


DEGRADATIONS: Dict[str, Callable[[np.ndarray, int, int], np.ndarray]] = {
    "blur": box_blur,
    "jpeg": jpeg_proxy,
    "lowlight": lowlight,
    "occlusion": occlusion,
}


def degrade(image: np.ndarray, spec: DegradeSpec) -> np.ndarray:
    """Apply one degradation to an (H, W, C) image in [0, 1]"""
    if spec.kind not in DEGRADATIONS:
        raise DegradationError(f"unknown degradation {spec.kind!r}; choose from {sorted(DEGRADATIONS)}")
    if spec.severity < 0:
        raise DegradationError(f"severity must be non-negative, got {spec.severity}")
    image = np.asarray(image)
    if image.ndim != 3:
        raise DegradationError(f"expected an (H, W, C) image, got shape {image.shape}")
    if spec.severity == 0:
        return image.copy()
    return DEGRADATIONS[spec.kind](image, spec.severity, spec.seed).astype(image.dtype, copy=False)


def degrade_batch(images: np.ndarray, spec: DegradeSpec) -> np.ndarray:
    """Per-image occlusion seeds are derived from (spec.seed, position)"""
    out = np.empty_like(images)
    for i, image in enumerate(images):
        seed = int(np.random.SeedSequence([spec.seed, i]).generate_state(1)[0])
        out[i] = degrade(image, DegradeSpec(spec.kind, spec.severity, seed))
    return out


def describe_severities() -> str:
    """Severity conventions, for the CLI help"""
    return (
        "blur: box kernel 2s+1 | jpeg: 8x8 DCT quantization step 2s (0-255 scale) | "
        "lowlight: x/(1+s) | occlusion: gray box over 10*s %% of the frame"
    )
