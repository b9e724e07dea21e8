"""
Annotation IO Module
COCO-style annotation files, dataset manifests and lazily loaded scene records
"""

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import jsonschema
import numpy as np
from loguru import logger
from PIL import Image

from src.geometry.box_ops import InvalidBoxError, LabeledBox, xywh_to_xyxy


MANIFEST_NAME = "manifest.json"

ANNOTATION_SCHEMA = {
    "type": "object",
    "required": ["images", "annotations", "categories"],
    "properties": {
        "images": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "width", "height"],
                "anyOf": [{"required": ["file_name"]}, {"required": ["file"]}],
                "properties": {
                    "id": {"type": "integer"},
                    "file_name": {"type": "string"},
                    "file": {"type": "string"},
                    "width": {"type": "integer", "minimum": 1},
                    "height": {"type": "integer", "minimum": 1},
                },
            },
        },
        "annotations": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "image_id", "bbox", "category_id"],
                "properties": {
                    "id": {"type": "integer"},
                    "image_id": {"type": "integer"},
                    "bbox": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
                    "category_id": {"type": "integer"},
                },
            },
        },
        "categories": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "name"],
                "properties": {"id": {"type": "integer"}, "name": {"type": "string"}},
            },
        },
    },
}


class AnnotationParseError(ValueError):
    """Annotation file is not valid JSON"""


class AnnotationValidationError(ValueError):
    """Annotation content violates the format or box invariants"""


@dataclass
class SceneRecord:
    """A scene whose image is read from disk on demand"""
    image_id: int
    scene_id: str
    image_path: Path
    width: int
    height: int
    gt: List[LabeledBox] = field(default_factory=list)

    def load_image(self) -> np.ndarray:
        """H x W x 3 float image in [0, 1]"""
        with Image.open(self.image_path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


@dataclass
class AnnotationSet:
    """Scenes of one annotation file plus its category names"""
    class_names: List[str]
    scenes: List[SceneRecord]

    def __len__(self) -> int:
        return len(self.scenes)

    def __iter__(self) -> Iterator[SceneRecord]:
        return iter(self.scenes)

    def __getitem__(self, index: int) -> SceneRecord:
        return self.scenes[index]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


@dataclass
class Manifest:
    """Dataset manifest: class list and one annotation file per split"""
    root: Path
    num_classes: int
    class_names: List[str]
    splits: Dict[str, Path]

    def load_split(self, split: str) -> AnnotationSet:
        if split not in self.splits:
            raise KeyError(f"Split '{split}' not in manifest (available: {sorted(self.splits)})")
        return load_annotations(self.splits[split])


def write_annotations(records: Sequence[SceneRecord], class_names: Sequence[str], path) -> Path:
    """Write scenes as COCO-style JSON; category ids are 1-based"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    images, annotations = [], []
    ann_id = 1
    for record in records:
        images.append({
            "id": record.image_id,
            "file_name": Path(os.path.relpath(record.image_path, path.parent)).as_posix(),
            "width": record.width,
            "height": record.height,
            "scene_id": record.scene_id,
        })
        for labeled in record.gt:
            x, y, w, h = labeled.box.as_xywh()
            annotations.append({
                "id": ann_id,
                "image_id": record.image_id,
                "bbox": [x, y, w, h],
                "category_id": labeled.class_id + 1,
                "area": w * h,
                "iscrowd": 0,
            })
            ann_id += 1

    payload = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": i + 1, "name": name} for i, name in enumerate(class_names)],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
    return path


def _parse(path: Path) -> Dict:
    text = path.read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        line = text.splitlines()[e.lineno - 1] if 0 < e.lineno <= len(text.splitlines()) else ""
        raise AnnotationParseError(
            f"{path}:{e.lineno}:{e.colno}: {e.msg} (line: {line.strip()[:80]!r})"
        ) from e


def load_annotations(path, image_root: Optional[Path] = None) -> AnnotationSet:
    """Read and validate a COCO-style annotation file.

    Category ids are mapped to contiguous class ids in ascending id order.
    Image paths resolve against ``image_root`` (default: the file's directory).
    """
    path = Path(path)
    payload = _parse(path)
    try:
        jsonschema.validate(payload, ANNOTATION_SCHEMA)
    except jsonschema.ValidationError as e:
        location = "/".join(str(p) for p in e.absolute_path)
        raise AnnotationValidationError(f"{path}: invalid annotation structure at '{location}': {e.message}") from e

    image_root = Path(image_root) if image_root is not None else path.parent
    categories = sorted(payload["categories"], key=lambda c: c["id"])
    class_of = {cat["id"]: idx for idx, cat in enumerate(categories)}

    scenes: Dict[int, SceneRecord] = {}
    for image in payload["images"]:
        file_name = image.get("file_name", image.get("file"))
        scenes[image["id"]] = SceneRecord(
            image_id=image["id"],
            scene_id=image.get("scene_id", Path(file_name).stem),
            image_path=image_root / file_name,
            width=image["width"],
            height=image["height"],
        )

    for ann in payload["annotations"]:
        ann_id = ann["id"]
        record = scenes.get(ann["image_id"])
        if record is None:
            raise AnnotationValidationError(f"annotation {ann_id}: unknown image_id {ann['image_id']}")
        if ann["category_id"] not in class_of:
            raise AnnotationValidationError(f"annotation {ann_id}: unknown category_id {ann['category_id']}")
        try:
            box = xywh_to_xyxy(ann["bbox"])
        except InvalidBoxError as e:
            raise AnnotationValidationError(f"annotation {ann_id}: {e}") from e
        if box.x0 < 0 or box.y0 < 0 or box.x1 > record.width or box.y1 > record.height:
            raise AnnotationValidationError(
                f"annotation {ann_id}: box {box.as_xyxy()} outside image "
                f"{record.width}x{record.height}"
            )
        record.gt.append(LabeledBox(box, class_of[ann["category_id"]]))

    logger.debug(f"Loaded {len(scenes)} scenes and {len(payload['annotations'])} boxes from {path}")
    return AnnotationSet([c["name"] for c in categories], list(scenes.values()))


def load_manifest(path) -> Manifest:
    path = Path(path)
    payload = _parse(path)
    try:
        return Manifest(
            root=path.parent,
            num_classes=int(payload["num_classes"]),
            class_names=list(payload["class_names"]),
            splits={name: path.parent / rel for name, rel in payload["splits"].items()},
        )
    except (KeyError, TypeError, ValueError) as e:
        raise AnnotationValidationError(f"{path}: malformed manifest ({e})") from e
