"""
Box Operations Module
Axis-aligned boxes, conversions, IoU and ground-truth box augmentation
"""

import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from loguru import logger


MAX_AUGMENT_RETRIES = 16


class InvalidBoxError(ValueError):
    """Box with non-positive extent or non-finite coordinates"""


class DegenerateBoxError(InvalidBoxError):
    """Box collapsed to zero area by clipping"""


class DegenerateAugmentationError(InvalidBoxError):
    """Augmentation kept producing crossing corners"""


@dataclass(frozen=True)
class Box:
    """Corner-form box in pixels: (x0, y0) top-left, (x1, y1) bottom-right"""
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        coords = (self.x0, self.y0, self.x1, self.y1)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidBoxError(f"Non-finite box coordinates: {coords}")
        if self.x0 >= self.x1 or self.y0 >= self.y1:
            raise InvalidBoxError(f"Box must have positive width and height: {coords}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_xyxy(self) -> List[float]:
        return [self.x0, self.y0, self.x1, self.y1]

    def as_xywh(self) -> List[float]:
        return [self.x0, self.y0, self.width, self.height]


@dataclass(frozen=True)
class LabeledBox:
    """Box with a foreground class id"""
    box: Box
    class_id: int

    def __post_init__(self):
        if self.class_id < 0:
            raise InvalidBoxError(f"class_id must be non-negative, got {self.class_id}")

    def check_class_range(self, num_classes: int) -> None:
        if not 0 <= self.class_id < num_classes:
            raise InvalidBoxError(
                f"class_id {self.class_id} outside [0, {num_classes})"
            )


class Detection(NamedTuple):
    """A predicted labeled box and its confidence"""
    box: LabeledBox
    score: float


def xywh_to_xyxy(b: Sequence[float]) -> Box:
    """Convert (x0, y0, w, h) to a corner-form Box"""
    x0, y0, w, h = (float(v) for v in b)
    if not (w > 0 and h > 0):
        raise InvalidBoxError(f"Width and height must be positive: w={w}, h={h}")
    return Box(x0, y0, x0 + w, y0 + h)


def clip_to_image(box: Box, width: float, height: float) -> Box:
    """Clamp a box to [0, width] x [0, height]"""
    if width <= 0 or height <= 0:
        raise InvalidBoxError(f"Image size must be positive: {width}x{height}")

    x0 = min(max(box.x0, 0.0), width)
    y0 = min(max(box.y0, 0.0), height)
    x1 = min(max(box.x1, 0.0), width)
    y1 = min(max(box.y1, 0.0), height)

    if x0 >= x1 or y0 >= y1:
        raise DegenerateBoxError(f"Box {box.as_xyxy()} collapses inside {width}x{height}")
    return Box(x0, y0, x1, y1)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes"""
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _apply_signs(x0: float, y0: float, w: float, h: float, k0: float,
                 signs: Sequence[int]) -> Tuple[float, float, float, float]:
    dx, dy = w / k0, h / k0
    return (
        x0 + signs[0] * dx,
        y0 + signs[1] * dy,
        x0 + w + signs[2] * dx,
        y0 + h + signs[3] * dy,
    )


def augment_box(b: Sequence[float], k0: float = 8.0,
                rng: Optional[np.random.Generator] = None,
                image_size: Optional[Tuple[float, float]] = None,
                signs: Optional[Sequence[int]] = None,
                max_retries: int = MAX_AUGMENT_RETRIES) -> Box:
    """Jitter every corner of an (x0, y0, w, h) box by +/- w/k0 or +/- h/k0.

    Each of the four signs is drawn independently and uniformly from {+1, -1}.
    Passing ``signs`` fixes the draw. ``image_size`` is (width, height); when
    given, the result is clipped to the image.
    """
    x0, y0, w, h = (float(v) for v in b)
    if not (w > 0 and h > 0):
        raise InvalidBoxError(f"Width and height must be positive: w={w}, h={h}")
    if k0 <= 0:
        raise ValueError(f"k0 must be positive, got {k0}")

    if signs is not None:
        if len(signs) != 4 or any(s not in (1, -1) for s in signs):
            raise ValueError(f"signs must be four values from {{+1, -1}}, got {signs}")
        attempts = [tuple(signs)]
    else:
        rng = rng if rng is not None else np.random.default_rng()
        attempts = (
            tuple(int(s) for s in rng.choice((1, -1), size=4)) for _ in range(max_retries)
        )

    for draw in attempts:
        nx0, ny0, nx1, ny1 = _apply_signs(x0, y0, w, h, k0, draw)
        if nx0 < nx1 and ny0 < ny1:
            box = Box(nx0, ny0, nx1, ny1)
            if image_size is not None:
                box = clip_to_image(box, image_size[0], image_size[1])
            return box

    logger.debug(f"Augmentation of {list(b)} with k0={k0} produced only crossing corners")
    raise DegenerateAugmentationError(
        f"Could not augment box {list(b)} with k0={k0} without crossing corners"
    )


def augmented_views(boxes: Sequence[Box], k0: float, per_box: int,
                    rng: np.random.Generator,
                    image_size: Optional[Tuple[float, float]] = None
                    ) -> Tuple[List[Box], List[int]]:
    """Build ``per_box`` augmented copies of every box.

    Returns the augmented boxes and, for each, the index of its source box.
    A view that cannot be built (crossing corners, clipped away) is skipped;
    the other views of the same image are kept.
    """
    views: List[Box] = []
    sources: List[int] = []
    for idx, box in enumerate(boxes):
        for _ in range(per_box):
            try:
                view = augment_box(box.as_xywh(), k0, rng=rng, image_size=image_size)
            except InvalidBoxError as e:
                logger.debug(f"Skipping augmented view of box {idx}: {e}")
                continue
            views.append(view)
            sources.append(idx)
    return views, sources
