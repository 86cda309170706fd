"""Synthetic shapes dataset: colored circles, squares, and triangles on a
plain noisy background, with exact box annotations. Deterministic per seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image

CATEGORY_NAMES = ("circle", "square", "triangle")


@dataclass(frozen=True)
class Annotation:
    category: int
    cx: float
    cy: float
    w: float
    h: float

    def to_xyxy(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


@dataclass
class Sample:
    image_id: str
    image: np.ndarray  # (H, W, 3) float32 in [0, 255], integer-valued
    annotations: list[Annotation]


@dataclass(frozen=True)
class DatasetConfig:
    count: int = 100
    image_size: int = 128
    min_objects: int = 1
    max_objects: int = 3
    min_side: int = 16
    max_side: int = 48
    noise_sigma: float = 2.0
    seed: int = 0
    categories: tuple[str, ...] = CATEGORY_NAMES


def _draw_shape(image: np.ndarray, category: int, cx: float, cy: float, side: float, color: np.ndarray) -> None:
    h, w = image.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    if category == 0:  # circle
        mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= (side / 2.0) ** 2
    elif category == 1:  # square
        mask = (np.abs(xs - cx) <= side / 2.0) & (np.abs(ys - cy) <= side / 2.0)
    else:  # upward triangle: apex on top, base at the bottom edge of the box
        top = cy - side / 2.0
        bottom = cy + side / 2.0
        frac = np.clip((ys - top) / max(side, 1e-9), 0.0, 1.0)
        mask = (ys >= top) & (ys <= bottom) & (np.abs(xs - cx) <= frac * side / 2.0)
    image[mask] = color


def _boxes_overlap(a: Annotation, b: Annotation) -> bool:
    ax1, ay1, ax2, ay2 = a.to_xyxy()
    bx1, by1, bx2, by2 = b.to_xyxy()
    return ax1 < bx2 and bx1 < ax2 and ay1 < by2 and by1 < ay2


def _render_sample(rng: np.random.Generator, config: DatasetConfig, image_id: str) -> Sample:
    size = config.image_size
    background = rng.uniform(90, 165, size=3)
    image = np.ones((size, size, 3), dtype=np.float64) * background
    n_objects = int(rng.integers(config.min_objects, config.max_objects + 1))
    annotations: list[Annotation] = []
    for _ in range(n_objects):
        category = int(rng.integers(0, len(config.categories)))
        for _attempt in range(50):
            side = float(rng.uniform(config.min_side, config.max_side))
            margin = side / 2.0 + 2.0
            cx = float(rng.uniform(margin, size - margin))
            cy = float(rng.uniform(margin, size - margin))
            ann = Annotation(category, cx, cy, side, side)
            if not any(_boxes_overlap(ann, other) for other in annotations):
                break
        else:
            continue  # no non-overlapping spot found, skip this object
        color = rng.uniform(0, 255, size=3)
        while np.abs(color - background).mean() < 60:
            color = rng.uniform(0, 255, size=3)
        _draw_shape(image, category, cx, cy, side, color)
        annotations.append(ann)
    image += rng.normal(0.0, config.noise_sigma, size=image.shape)
    # quantize so in-memory pixels match a PNG round trip exactly
    image = np.clip(np.rint(image), 0, 255).astype(np.float32)
    return Sample(image_id=image_id, image=image, annotations=annotations)


def generate_synthetic_dataset(config: DatasetConfig) -> list[Sample]:
    """Deterministic dataset of shape images; every object lies fully inside the canvas."""
    if config.max_objects < config.min_objects:
        raise ValueError("max_objects must be >= min_objects")
    children = np.random.SeedSequence(config.seed).spawn(config.count)
    return [
        _render_sample(np.random.default_rng(child), config, f"{i:06d}")
        for i, child in enumerate(children)
    ]


def save_image_png(image: np.ndarray, path: Path) -> None:
    Image.fromarray(np.clip(np.rint(image), 0, 255).astype(np.uint8)).save(path, format="PNG")


def load_image_png(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)


def save_dataset(samples: list[Sample], root: Path, config: DatasetConfig | None = None) -> Path:
    """Write PNGs plus a line-delimited manifest; returns the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    manifest = root / "manifest.jsonl"
    with manifest.open("w") as fh:
        for sample in samples:
            rel = f"images/{sample.image_id}.png"
            save_image_png(sample.image, root / rel)
            record = {
                "image_id": sample.image_id,
                "path": rel,
                "annotations": [asdict(a) for a in sample.annotations],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    if config is not None:
        (root / "dataset_config.json").write_text(json.dumps(asdict(config), indent=2, sort_keys=True))
    return manifest


def load_dataset(root: Path) -> list[Sample]:
    root = Path(root)
    samples: list[Sample] = []
    with (root / "manifest.jsonl").open() as fh:
        for line in fh:
            record = json.loads(line)
            annotations = [Annotation(**a) for a in record["annotations"]]
            image = load_image_png(root / record["path"])
            samples.append(Sample(image_id=record["image_id"], image=image, annotations=annotations))
    return samples
