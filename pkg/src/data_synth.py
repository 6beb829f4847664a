"""
Procedural driver-behavior stand-in dataset
Class = glyph shape at a class-specific position; domain = background style.
Also loads labeled image folders and exported manifests.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image, UnidentifiedImageError

from configs.configurations import MANIFEST_NAME
from src.autodiff import CdiraError
from src.config import SynthSpec

logger = logging.getLogger(__name__)

GLYPHS = ("circle", "cross", "bar", "L", "T", "dot-pair", "ring", "wedge", "chevron", "square")
IMAGE_SUFFIXES = {".png", ".ppm", ".pgm"}
GLYPH_COLOR = 1.0
BACKGROUND_MAX = 0.85


class DatasetError(CdiraError, ValueError):
    """Dataset cannot be generated, split or loaded as requested"""


@dataclass
class Sample:
    """One labeled image"""
    sample_id: int
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    label: int
    domain: int = -1  # true background style; -1 when unknown
    box: Optional[Tuple[int, int, int, int]] = None  # glyph (x0, y0, x1, y1), end-exclusive
    split: str = ""


def glyph_mask(shape: str, size: int) -> np.ndarray:
    """Boolean size x size mask of a glyph"""
    yy, xx = np.mgrid[0:size, 0:size]
    u = (xx + 0.5) / size * 2 - 1
    v = (yy + 0.5) / size * 2 - 1
    r2 = u ** 2 + v ** 2
    masks = {
        "circle": r2 <= 0.81,
        "cross": (np.abs(u) <= 0.3) | (np.abs(v) <= 0.3),
        "bar": np.abs(v) <= 0.35,
        "L": (u <= -0.35) | (v >= 0.35),
        "T": (v <= -0.35) | (np.abs(u) <= 0.3),
        "dot-pair": ((u + 0.5) ** 2 + v ** 2 <= 0.2) | ((u - 0.5) ** 2 + v ** 2 <= 0.2),
        "ring": (r2 >= 0.3) & (r2 <= 0.95),
        "wedge": v >= u,
        "chevron": np.abs(v - (1.2 * np.abs(u) - 0.5)) <= 0.3,
        "square": np.maximum(np.abs(u), np.abs(v)) <= 0.8,
    }
    if shape not in masks:
        raise DatasetError(f"unknown glyph {shape!r}")
    mask = masks[shape]
    if not mask.any():
        mask[size // 2, size // 2] = True
    return mask


def class_center(label: int, spec: SynthSpec) -> Tuple[float, float]:
    """Glyph center (x, y) for a class; classes sit on a circle around the frame center"""
    angle = 2 * np.pi * label / spec.n_classes
    radius = 0.25 * spec.image_size
    half = spec.image_size / 2
    return half + radius * np.cos(angle), half + radius * np.sin(angle)


def check_fit(spec: SynthSpec):
    margin = 0.25 * spec.image_size - spec.glyph_max / 2 - spec.jitter
    if margin < 0:
        raise DatasetError(
            f"glyph of side {spec.glyph_max} with jitter {spec.jitter} does not fit a "
            f"{spec.image_size}px frame (needs glyph_max/2 + jitter <= image_size/4)"
        )


def domain_style(domain: int, seed: int) -> Dict[str, np.ndarray]:
    """Base color and low-frequency texture parameters of one background style"""
    rng = np.random.default_rng([seed, 1_000_000 + domain])
    return {
        "base": rng.uniform(0.15, 0.65, size=3),
        "freq": rng.integers(1, 3, size=2),
        "phase": rng.uniform(0, 2 * np.pi, size=3),
        "amplitude": rng.uniform(0.04, 0.1, size=3),
    }


def render_background(style: Dict[str, np.ndarray], size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    fx, fy = style["freq"]
    jitter = rng.uniform(-0.3, 0.3)
    wave = np.sin(2 * np.pi * (fx * xx + fy * yy)[..., None] + style["phase"] + jitter)
    image = style["base"] + style["amplitude"] * wave + rng.normal(0, 0.02, size=(size, size, 3))
    return np.clip(image, 0.0, BACKGROUND_MAX)


def render_sample(index: int, label: int, domain: int, spec: SynthSpec, style: Dict[str, np.ndarray]) -> Sample:
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    image = render_background(style, size, rng)

    glyph = int(rng.integers(spec.glyph_min, spec.glyph_max + 1))
    dx, dy = rng.integers(-spec.jitter, spec.jitter + 1, size=2)
    cx, cy = class_center(label, spec)
    x0 = int(np.clip(round(cx - glyph / 2 + dx), 0, size - glyph))
    y0 = int(np.clip(round(cy - glyph / 2 + dy), 0, size - glyph))

    mask = glyph_mask(GLYPHS[label], glyph)
    patch = image[y0:y0 + glyph, x0:x0 + glyph]
    patch[mask] = GLYPH_COLOR
    rows, cols = np.nonzero(mask)
    box = (x0 + int(cols.min()), y0 + int(rows.min()), x0 + int(cols.max()) + 1, y0 + int(rows.max()) + 1)
    return Sample(sample_id=index, image=image.astype(np.float32), label=label, domain=domain, box=box)


def generate_dataset(spec: SynthSpec, seed: Optional[int] = None, threads: int = 1) -> List[Sample]:
    """
    Every (class, domain) cell gets spec.per_cell images

    Args:
        spec: generator settings
        seed: overrides spec.seed when given
        threads: worker threads; output is identical for any value

    Returns:
        Samples ordered by sample_id
    """
    if seed is not None:
        spec = spec.model_copy(update={"seed": seed})
    if spec.n_classes > len(GLYPHS):
        raise DatasetError(f"at most {len(GLYPHS)} classes have a glyph, got {spec.n_classes}")
    check_fit(spec)

    styles = [domain_style(d, spec.seed) for d in range(spec.n_domains)]
    jobs = [
        ((label * spec.n_domains + domain) * spec.per_cell + rep, label, domain)
        for label in range(spec.n_classes)
        for domain in range(spec.n_domains)
        for rep in range(spec.per_cell)
    ]

    def _render(job):
        index, label, domain = job
        return render_sample(index, label, domain, spec, styles[domain])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(_render, jobs))
    else:
        samples = [_render(job) for job in jobs]
    logger.info("generated %d samples (%d classes x %d domains)", len(samples), spec.n_classes, spec.n_domains)
    return samples


def _allocate(n: int, fractions: Sequence[float]) -> List[int]:
    """Largest-remainder rounding of n * fractions"""
    raw = [n * f for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:n - sum(counts)]:
        counts[i] += 1
    return counts


def stratified_split(
    samples: Sequence[Sample],
    fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0
) -> Tuple[List[Sample], List[Sample], List[Sample]]:
    """Per-class proportional train/val/test split with a seeded shuffle inside each class"""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"fractions must be three non-negative values summing to 1, got {fractions}")

    by_class: Dict[int, List[Sample]] = {}
    for sample in samples:
        by_class.setdefault(sample.label, []).append(sample)

    names = ("train", "val", "test")
    splits: Tuple[List[Sample], ...] = ([], [], [])
    for label in sorted(by_class):
        members = sorted(by_class[label], key=lambda s: s.sample_id)
        if len(members) < 10:
            raise DatasetError(f"class {label} has {len(members)} samples; at least 10 are needed to split")
        order = np.random.default_rng([seed, label]).permutation(len(members))
        start = 0
        for part, count in enumerate(_allocate(len(members), fractions)):
            for i in order[start:start + count]:
                splits[part].append(replace(members[i], split=names[part]))
            start += count
    return tuple(sorted(part, key=lambda s: s.sample_id) for part in splits)


def _read_image(path: Path, image_size: Optional[int]) -> np.ndarray:
    with Image.open(path) as img:
        img = img.convert("RGB")
        if image_size is not None and img.size != (image_size, image_size):
            img = img.resize((image_size, image_size), Image.BILINEAR)
        return np.asarray(img, dtype=np.float32) / 255.0


def load_image_folder(root_path: Union[str, Path], image_size: int = 64) -> List[Sample]:
    """
    Load root/<class_name>/<image files>

    Class names are sorted to assign label indices; images are resized (bilinear) and
    scaled to [0, 1]. Unreadable files are skipped with a warning.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError(f"image folder not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"no class directories under {root}")

    samples: List[Sample] = []
    for label, class_dir in enumerate(class_dirs):
        loaded = 0
        for path in sorted(p for p in class_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
            try:
                image = _read_image(path, image_size)
            except (OSError, UnidentifiedImageError) as e:
                logger.warning("skipping unreadable image %s: %s", path, e)
                continue
            samples.append(Sample(sample_id=len(samples), image=image, label=label))
            loaded += 1
        if loaded == 0:
            raise DatasetError(f"class directory {class_dir.name} has no readable images")
    logger.info("loaded %d images in %d classes from %s", len(samples), len(class_dirs), root)
    return samples


def export_dataset(samples: Sequence[Sample], root: Union[str, Path]) -> Path:
    """Write root/cNN/<sample_id>.ppm plus manifest.csv (loadable by both loaders)"""
    root = Path(root)
    rows = []
    for sample in samples:
        rel = Path(f"c{sample.label:02d}") / f"{sample.sample_id:06d}.ppm"
        (root / rel.parent).mkdir(parents=True, exist_ok=True)
        pixels = np.clip(np.round(sample.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(pixels, mode="RGB").save(root / rel)
        rows.append({
            "sample_id": sample.sample_id,
            "class": sample.label,
            "domain": sample.domain,
            "split": sample.split,
            "box": " ".join(str(v) for v in sample.box) if sample.box else "",
            "path": rel.as_posix(),
        })
    manifest = root / MANIFEST_NAME
    pd.DataFrame(rows, columns=["sample_id", "class", "domain", "split", "box", "path"]).to_csv(manifest, index=False)
    logger.info("exported %d samples to %s", len(rows), root)
    return manifest


def load_manifest(root: Union[str, Path], image_size: Optional[int] = None) -> List[Sample]:
    root = Path(root)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise DatasetError(f"manifest not found: {manifest}")
    frame = pd.read_csv(manifest, keep_default_na=False, dtype={"box": str, "split": str})
    samples = []
    for row in frame.to_dict("records"):
        box = tuple(int(v) for v in row["box"].split()) if row["box"] else None
        samples.append(Sample(
            sample_id=int(row["sample_id"]),
            image=_read_image(root / row["path"], image_size),
            label=int(row["class"]),
            domain=int(row["domain"]),
            box=box,
            split=row["split"]
        ))
    return samples


def stack_images(samples: Sequence[Sample]) -> np.ndarray:
    if not samples:
        raise DatasetError("no samples to stack")
    return np.stack([s.image for s in samples]).astype(np.float32, copy=False)


def stack_labels(samples: Sequence[Sample]) -> np.ndarray:
    return np.array([s.label for s in samples], dtype=np.int64)
