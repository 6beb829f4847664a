"""
Saliency overlays and result plots
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from PIL import Image, ImageDraw  # noqa: E402

from src.autodiff import CdiraError, no_grad  # noqa: E402
from src.cdira_model import CdiraModel  # noqa: E402

logger = logging.getLogger(__name__)

ALPHA = 0.5
MARK_COLOR = (255, 220, 0)


class VisualizationError(CdiraError):
    """Overlay or plot could not be written"""


@dataclass
class OverlayResult:
    image: np.ndarray  # (H, W, 3) blended overlay in [0, 1], without marks
    saliency: np.ndarray  # (H, W) upsampled, normalized to [0, 1]
    marks: List[Tuple[int, int]]  # Top-K feature-map cells (h, w)
    pred: int


def upsample_nearest(s: np.ndarray, height: int, width: int) -> np.ndarray:
    rows = np.arange(height) * s.shape[0] // height
    cols = np.arange(width) * s.shape[1] // width
    return s[rows][:, cols]


def normalize(s: np.ndarray) -> np.ndarray:
    peak = float(s.max()) if s.size else 0.0
    return s / peak if peak > 0 else np.zeros_like(s)


def grayscale(image: np.ndarray) -> np.ndarray:
    lum = image[..., 0] * 0.299 + image[..., 1] * 0.587 + image[..., 2] * 0.114
    return np.repeat(lum[..., None], 3, axis=2)


def blend(image: np.ndarray, saliency: np.ndarray, alpha: float = ALPHA) -> np.ndarray:
    """Red saliency layer alpha-blended over the grayscale image"""
    gray = grayscale(image)
    weight = alpha * saliency[..., None]
    red = np.zeros_like(gray)
    red[..., 0] = 1.0
    return (1 - weight) * gray + weight * red


def saliency_map(image: np.ndarray, model: CdiraModel) -> Tuple[np.ndarray, int]:
    """Feature-map saliency (h, w) and fused-head prediction for one image"""
    with no_grad():
        f = model.features(image)
        g = model.pooled(f)
        fused, _ = model.roi_path(f, g)
    return model.saliency(f.data)[0], int(fused.data.argmax(axis=1)[0])


def saliency_overlay(image: np.ndarray, model: CdiraModel, out_path: Optional[Union[str, Path]] = None) -> OverlayResult:
    """
    Overlay the model's saliency on an image and optionally write it (PNG or PPM)

    The written file additionally outlines the Top-K cells; the returned array does not.
    """
    image = np.asarray(image, dtype=np.float32)
    s, pred = saliency_map(image, model)
    selection = model.select_topk(s, model.k)
    up = normalize(upsample_nearest(s, image.shape[0], image.shape[1]))
    result = OverlayResult(image=blend(image, up), saliency=up, marks=selection.positions(0), pred=pred)
    if out_path is not None:
        write_overlay(result, s.shape, out_path)
    return result


def write_overlay(result: OverlayResult, cells: Tuple[int, int], out_path: Union[str, Path]):
    path = Path(out_path)
    height, width = result.image.shape[:2]
    pixels = np.clip(np.round(result.image * 255.0), 0, 255).astype(np.uint8)
    canvas = Image.fromarray(pixels, mode="RGB")
    draw = ImageDraw.Draw(canvas)
    cell_h, cell_w = height / cells[0], width / cells[1]
    for h, w in result.marks:
        box = (int(w * cell_w), int(h * cell_h), int((w + 1) * cell_w) - 1, int((h + 1) * cell_h) - 1)
        draw.rectangle(box, outline=MARK_COLOR)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        canvas.save(path, format="PPM" if path.suffix.lower() == ".ppm" else "PNG")
    except OSError as e:
        raise VisualizationError(f"cannot write overlay {path}: {e}") from e


def center_of_mass(saliency: np.ndarray) -> Tuple[float, float]:
    """(x, y) in pixel coordinates of an (H, W) saliency map"""
    total = float(saliency.sum())
    height, width = saliency.shape
    if total <= 0:
        return (width - 1) / 2, (height - 1) / 2
    ys, xs = np.mgrid[0:height, 0:width]
    return float((xs * saliency).sum() / total), float((ys * saliency).sum() / total)


def localization_rate(model: CdiraModel, images: np.ndarray, labels, boxes: Sequence) -> Dict[str, float]:
    """Share of correctly classified images whose saliency center of mass lies inside the glyph box"""
    hits, correct = 0, 0
    for image, label, box in zip(images, labels, boxes):
        if box is None:
            continue
        s, pred = saliency_map(image, model)
        if pred != int(label):
            continue
        correct += 1
        x, y = center_of_mass(upsample_nearest(s, image.shape[0], image.shape[1]))
        x0, y0, x1, y1 = box
        if x0 <= x < x1 and y0 <= y < y1:
            hits += 1
    rate = hits / correct if correct else 0.0
    logger.info("saliency localization %d/%d = %.3f", hits, correct, rate)
    return {"rate": rate, "hits": hits, "correct": correct}


def _save(fig, path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_tau_sweep(frame: pd.DataFrame, path: Union[str, Path]):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(frame["tau"], frame["usage"], marker="o", label="ROI usage")
    ax.plot(frame["tau"], frame["f1"], marker="s", label="macro F1")
    ax.set_xlabel("routing threshold tau")
    ax.set_ylim(0, 1.05)
    ax.grid(alpha=0.3)
    ax.legend()
    _save(fig, path)


def plot_classwise(per_class: Dict[int, float], path: Union[str, Path], class_names: Optional[Sequence[str]] = None):
    classes = sorted(per_class)
    names = [class_names[c] if class_names else str(c) for c in classes]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(names, [per_class[c] for c in classes], color="tab:red")
    ax.set_ylabel("ROI usage ratio")
    ax.set_xlabel("class")
    _save(fig, path)


def plot_robustness(frame: pd.DataFrame, path: Union[str, Path]):
    fig, ax = plt.subplots(figsize=(6, 4))
    for kind, part in frame.groupby("kind", sort=True):
        ax.plot(part["severity"], part["accuracy"], marker="o", label=kind)
    ax.set_xlabel("severity")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.05)
    ax.grid(alpha=0.3)
    ax.legend()
    _save(fig, path)
