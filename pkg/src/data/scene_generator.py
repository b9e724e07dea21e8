"""
Synthetic Scene Generator Module
Renders imbalanced, ambiguity-controlled elliptical cell scenes with tight GT boxes
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from loguru import logger
from PIL import Image
from pydantic import BaseModel, Field, field_validator, model_validator

from src.geometry.box_ops import Box, InvalidBoxError, LabeledBox

from .annotation_io import MANIFEST_NAME, SceneRecord, write_annotations


SPLITS = ("train", "val", "test")

# Appearance endpoints for level 0 and level 1
CYTOPLASM_LOW = np.array([0.88, 0.62, 0.70])
CYTOPLASM_HIGH = np.array([0.50, 0.48, 0.82])
NUCLEUS_LOW = np.array([0.55, 0.35, 0.55])
NUCLEUS_HIGH = np.array([0.20, 0.12, 0.38])
RADIUS_BASE, RADIUS_SPAN = 7.0, 6.0


class DatasetSpec(BaseModel):
    """Knobs of a synthetic detection dataset"""
    num_classes: int = Field(default=4, ge=1)
    class_frequencies: List[float] = Field(default_factory=lambda: [100.0, 50.0, 10.0, 2.0])
    class_names: Optional[List[str]] = None
    ambiguity: float = Field(default=0.6, ge=0.0, le=1.0)
    image_size: int = Field(default=128, ge=32)
    scenes_per_split: Dict[str, int] = Field(
        default_factory=lambda: {"train": 400, "val": 50, "test": 100}
    )
    min_cells: int = Field(default=1, ge=0)
    max_cells: int = Field(default=12, ge=1)
    seed: int = 0

    @field_validator("class_frequencies")
    @classmethod
    def _positive_frequencies(cls, value: List[float]) -> List[float]:
        if any(f <= 0 for f in value):
            raise ValueError("class frequencies must be positive")
        return value

    @model_validator(mode="after")
    def _consistent(self) -> "DatasetSpec":
        if len(self.class_frequencies) != self.num_classes:
            raise ValueError(
                f"{len(self.class_frequencies)} frequencies given for {self.num_classes} classes"
            )
        if self.class_names is not None and len(self.class_names) != self.num_classes:
            raise ValueError("class_names length must equal num_classes")
        if self.min_cells > self.max_cells:
            raise ValueError("min_cells must not exceed max_cells")
        unknown = set(self.scenes_per_split) - set(SPLITS)
        if unknown:
            raise ValueError(f"Unknown splits {sorted(unknown)}, expected a subset of {SPLITS}")
        return self

    def names(self) -> List[str]:
        return self.class_names or [f"class_{c}" for c in range(self.num_classes)]

    def probabilities(self) -> np.ndarray:
        freqs = np.asarray(self.class_frequencies, dtype=np.float64)
        return freqs / freqs.sum()


@dataclass
class CellAppearance:
    """Latent appearance levels of one rendered cell"""
    size_level: float
    shape_level: float
    color_level: float


@dataclass
class DetectionScene:
    """Image in [0, 1] (H x W x 3) with its ground-truth boxes"""
    image: np.ndarray
    gt: List[LabeledBox]
    scene_id: str

    def __post_init__(self):
        height, width = self.image.shape[:2]
        for labeled in self.gt:
            b = labeled.box
            if b.x0 < 0 or b.y0 < 0 or b.x1 > width or b.y1 > height:
                raise InvalidBoxError(f"GT box {b.as_xyxy()} outside {width}x{height} in {self.scene_id}")


def _level_spacing(num_classes: int) -> float:
    return 1.0 / (num_classes - 1) if num_classes > 1 else 1.0


def class_level_mean(spec: DatasetSpec, class_id: int) -> float:
    """Appearance level mean of a class; ambiguity pulls every class toward 0.5"""
    base = class_id * _level_spacing(spec.num_classes) if spec.num_classes > 1 else 0.5
    return (1.0 - spec.ambiguity) * base + spec.ambiguity * 0.5


def appearance_range(spec: DatasetSpec, class_id: int) -> Tuple[float, float]:
    """Support of every appearance level of a class"""
    half_width = 0.4 * _level_spacing(spec.num_classes) if spec.num_classes > 1 else 0.2
    mean = class_level_mean(spec, class_id)
    return mean - half_width, mean + half_width


def sample_appearance(spec: DatasetSpec, class_id: int, rng: np.random.Generator) -> CellAppearance:
    lo, hi = appearance_range(spec, class_id)
    size, shape, color = rng.uniform(lo, hi, size=3)
    return CellAppearance(float(size), float(shape), float(color))


def sample_cell_classes(spec: DatasetSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    """Class ids drawn proportionally to the dataset's class frequencies"""
    return rng.choice(spec.num_classes, size=count, p=spec.probabilities())


def _half_step(value: float, minimum: float) -> float:
    return max(minimum, round(value * 2.0) / 2.0)


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    coarse = rng.uniform(0.86, 0.97, size=(6, 6, 3)).astype(np.float32)
    channels = [
        np.asarray(
            Image.fromarray(np.ascontiguousarray(coarse[..., ch]), mode="F").resize((size, size), Image.BILINEAR)
        )
        for ch in range(3)
    ]
    texture = np.stack(channels, axis=-1).astype(np.float64)
    texture += rng.normal(0.0, 0.015, size=texture.shape)
    return np.clip(texture, 0.0, 1.0)


def _paint_ellipse(image: np.ndarray, cx: float, cy: float, rx: float, ry: float,
                   color: np.ndarray) -> None:
    height, width = image.shape[:2]
    ys = np.arange(height)[:, None] + 0.5
    xs = np.arange(width)[None, :] + 0.5
    inside = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
    image[inside] = color


def generate_scene(spec: DatasetSpec, rng: np.random.Generator, scene_id: str = "scene") -> DetectionScene:
    """Render one scene of 1-12 (by default) elliptical cells on a textured background"""
    size = spec.image_size
    image = _background(size, rng)
    count = int(rng.integers(spec.min_cells, spec.max_cells + 1))
    classes = sample_cell_classes(spec, count, rng)

    gt: List[LabeledBox] = []
    for class_id in classes.tolist():
        look = sample_appearance(spec, class_id, rng)
        rx = _half_step(RADIUS_BASE + RADIUS_SPAN * look.size_level, 2.0)
        ratio = float(np.clip(1.0 - 0.45 * look.shape_level, 0.35, 1.0))
        ry = _half_step(rx * ratio, 2.0)

        cx = int(rng.integers(math.ceil(2 * rx), math.floor(2 * (size - rx)) + 1)) / 2.0
        cy = int(rng.integers(math.ceil(2 * ry), math.floor(2 * (size - ry)) + 1)) / 2.0

        t = float(np.clip(look.color_level, 0.0, 1.0))
        cytoplasm = (1 - t) * CYTOPLASM_LOW + t * CYTOPLASM_HIGH
        nucleus = (1 - t) * NUCLEUS_LOW + t * NUCLEUS_HIGH
        nucleus_scale = float(np.clip(0.3 + 0.25 * look.size_level, 0.2, 0.7))

        _paint_ellipse(image, cx, cy, rx, ry, cytoplasm)
        _paint_ellipse(image, cx, cy, rx * nucleus_scale, ry * nucleus_scale, nucleus)
        gt.append(LabeledBox(Box(cx - rx, cy - ry, cx + rx, cy + ry), int(class_id)))

    return DetectionScene(image=np.clip(image, 0.0, 1.0), gt=gt, scene_id=scene_id)


def scene_rng(spec: DatasetSpec, split: str, index: int) -> np.random.Generator:
    """Independent stream per (seed, split, scene)"""
    return np.random.default_rng([spec.seed, SPLITS.index(split), index])


def save_png(image: np.ndarray, path: Path) -> None:
    pixels = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels, mode="RGB").save(path, format="PNG")


def generate_dataset(spec: DatasetSpec, output_dir) -> Path:
    """Write PNG images, one COCO-style annotation file per split and a manifest"""
    output_dir = Path(output_dir)
    (output_dir / "annotations").mkdir(parents=True, exist_ok=True)

    split_files: Dict[str, str] = {}
    for split in SPLITS:
        count = spec.scenes_per_split.get(split, 0)
        if split not in spec.scenes_per_split:
            continue
        image_dir = output_dir / "images" / split
        image_dir.mkdir(parents=True, exist_ok=True)

        records: List[SceneRecord] = []
        for index in range(count):
            scene_id = f"{split}_{index:05d}"
            scene = generate_scene(spec, scene_rng(spec, split, index), scene_id)
            image_path = image_dir / f"{scene_id}.png"
            save_png(scene.image, image_path)
            records.append(SceneRecord(
                image_id=index,
                scene_id=scene_id,
                image_path=image_path,
                width=spec.image_size,
                height=spec.image_size,
                gt=scene.gt,
            ))

        annotation_path = output_dir / "annotations" / f"{split}.json"
        write_annotations(records, spec.names(), annotation_path)
        split_files[split] = annotation_path.relative_to(output_dir).as_posix()
        n_boxes = sum(len(r.gt) for r in records)
        logger.info(f"Generated {split} split: {count} scenes, {n_boxes} boxes")

    manifest = {
        "format": "cellcompare-manifest",
        "version": 1,
        "num_classes": spec.num_classes,
        "class_names": spec.names(),
        "splits": split_files,
        "spec": spec.model_dump(),
    }
    manifest_path = output_dir / MANIFEST_NAME
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)

    logger.info(f"Dataset manifest written: {manifest_path}")
    return manifest_path
