"""
Detection Evaluator Module
COCO-style AP / AR over IoU 0.50:0.95 with per-class AP50
"""

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from loguru import logger

from src.geometry.box_ops import Detection, LabeledBox, iou


IOU_THRESHOLDS = np.linspace(0.5, 0.95, int(np.round((0.95 - 0.5) / 0.05)) + 1, endpoint=True)
RECALL_POINTS = np.linspace(0.0, 1.0, 101, endpoint=True)
MAX_DETECTIONS = 100


class EvaluationError(ValueError):
    """Detections and ground truth disagree on the class universe"""


@dataclass
class EvalReport:
    """Aggregate and per-class metrics; classes without GT are absent from the maps"""
    ap: float
    ap50: float
    ap75: float
    ar: float
    per_class_ap50: Dict[int, float] = field(default_factory=dict)
    per_class_ap: Dict[int, float] = field(default_factory=dict)
    per_class_ar: Dict[int, float] = field(default_factory=dict)
    num_gt: Dict[int, int] = field(default_factory=dict)
    num_images: int = 0
    class_names: Optional[List[str]] = None

    def to_dict(self) -> Dict:
        payload = asdict(self)
        for key in ("per_class_ap50", "per_class_ap", "per_class_ar", "num_gt"):
            payload[key] = {str(k): v for k, v in payload[key].items()}
        return payload

    def class_name(self, class_id: int) -> str:
        if self.class_names and class_id < len(self.class_names):
            return self.class_names[class_id]
        return str(class_id)


def _order(scores: Sequence[float]) -> np.ndarray:
    """Descending score order; equal scores keep input order"""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="mergesort")


def _greedy_match(order: np.ndarray, overlaps: np.ndarray, iou_thresh: float) -> List[bool]:
    flags = [False] * overlaps.shape[0]
    taken = np.zeros(overlaps.shape[1], dtype=bool)
    for d in order:
        best, best_iou = -1, iou_thresh
        for g in range(overlaps.shape[1]):
            if taken[g] or overlaps[d, g] < best_iou:
                continue
            if best < 0 or overlaps[d, g] > overlaps[d, best]:
                best, best_iou = g, overlaps[d, g]
        if best >= 0:
            taken[best] = True
            flags[d] = True
    return flags


def match_detections(dets: Sequence[Detection], gts: Sequence[LabeledBox], iou_thresh: float) -> List[bool]:
    """TP flags for detections of one image, in input order.

    Detections are visited by descending score; each takes the highest-IoU unmatched
    GT of its class with IoU >= ``iou_thresh``.
    """
    overlaps = np.zeros((len(dets), len(gts)))
    for d, det in enumerate(dets):
        for g, gt in enumerate(gts):
            if det.box.class_id == gt.class_id:
                overlaps[d, g] = iou(det.box.box, gt.box)
            else:
                overlaps[d, g] = -1.0
    return _greedy_match(_order([det.score for det in dets]), overlaps, iou_thresh)


def average_precision(flags: Sequence[bool], scores: Sequence[float], num_gt: int) -> Optional[float]:
    """101-point interpolated AP. None when there is neither GT nor any detection"""
    if num_gt == 0:
        return 0.0 if len(flags) else None
    if not len(flags):
        return 0.0

    order = _order(scores)
    tp = np.asarray(flags, dtype=np.float64)[order]
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / num_gt
    precision = tp_cum / (tp_cum + fp_cum)

    for i in range(len(precision) - 1, 0, -1):
        if precision[i] > precision[i - 1]:
            precision[i - 1] = precision[i]

    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.array([precision[i] if i < len(precision) else 0.0 for i in idx])
    return float(sampled.mean())


def _iou_matrix(dets: List[Detection], gts: List[LabeledBox]) -> np.ndarray:
    if not dets or not gts:
        return np.zeros((len(dets), len(gts)))
    d = np.array([det.box.box.as_xyxy() for det in dets])
    g = np.array([gt.box.as_xyxy() for gt in gts])
    lt = np.maximum(d[:, None, :2], g[None, :, :2])
    rb = np.minimum(d[:, None, 2:], g[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_d = (d[:, 2] - d[:, 0]) * (d[:, 3] - d[:, 1])
    area_g = (g[:, 2] - g[:, 0]) * (g[:, 3] - g[:, 1])
    return inter / (area_d[:, None] + area_g[None, :] - inter)


def evaluate(dets_per_image: Sequence[Sequence[Detection]], gts_per_image: Sequence[Sequence[LabeledBox]],
             num_classes: Optional[int] = None, class_names: Optional[List[str]] = None,
             max_detections: int = MAX_DETECTIONS) -> EvalReport:
    """AP over IoU 0.50:0.95, AP50, AP75 and AR@max_detections, averaged over classes with GT"""
    if len(dets_per_image) != len(gts_per_image):
        raise EvaluationError(
            f"{len(dets_per_image)} detection lists for {len(gts_per_image)} images"
        )

    if num_classes is not None:
        universe = set(range(num_classes))
    else:
        universe = {gt.class_id for gts in gts_per_image for gt in gts}
    for dets in dets_per_image:
        for det in dets:
            if det.box.class_id not in universe:
                raise EvaluationError(f"Detection class {det.box.class_id} is not in the GT class universe")

    num_gt = {c: 0 for c in sorted(universe)}
    for gts in gts_per_image:
        for gt in gts:
            if gt.class_id not in num_gt:
                raise EvaluationError(f"GT class {gt.class_id} outside [0, {num_classes})")
            num_gt[gt.class_id] += 1

    ap_table: Dict[int, List[float]] = {}
    ar_table: Dict[int, List[float]] = {}
    for c in sorted(universe):
        if num_gt[c] == 0:
            continue
        per_thresh_flags = [[] for _ in IOU_THRESHOLDS]
        scores: List[float] = []
        for dets, gts in zip(dets_per_image, gts_per_image):
            class_dets = [d for d in dets if d.box.class_id == c]
            class_dets = [class_dets[i] for i in _order([d.score for d in class_dets])[:max_detections]]
            class_gts = [g for g in gts if g.class_id == c]
            overlaps = _iou_matrix(class_dets, class_gts)
            order = np.arange(len(class_dets))
            for t, thresh in enumerate(IOU_THRESHOLDS):
                per_thresh_flags[t].extend(_greedy_match(order, overlaps, thresh))
            scores.extend(d.score for d in class_dets)

        ap_table[c] = [average_precision(flags, scores, num_gt[c]) for flags in per_thresh_flags]
        ar_table[c] = [sum(flags) / num_gt[c] for flags in per_thresh_flags]

    if not ap_table:
        logger.warning("Evaluation found no ground-truth boxes; reporting zeros")
        return EvalReport(0.0, 0.0, 0.0, 0.0, num_gt=num_gt, num_images=len(gts_per_image),
                          class_names=class_names)

    ap_matrix = np.array([ap_table[c] for c in ap_table])
    ar_matrix = np.array([ar_table[c] for c in ar_table])
    i75 = int(np.argmin(np.abs(IOU_THRESHOLDS - 0.75)))

    report = EvalReport(
        ap=float(ap_matrix.mean()),
        ap50=float(ap_matrix[:, 0].mean()),
        ap75=float(ap_matrix[:, i75].mean()),
        ar=float(ar_matrix.mean()),
        per_class_ap50={c: float(ap_table[c][0]) for c in ap_table},
        per_class_ap={c: float(np.mean(ap_table[c])) for c in ap_table},
        per_class_ar={c: float(np.mean(ar_table[c])) for c in ar_table},
        num_gt=num_gt,
        num_images=len(gts_per_image),
        class_names=class_names,
    )
    logger.debug(f"Evaluation: AP={report.ap:.4f} AP50={report.ap50:.4f} AP75={report.ap75:.4f} AR={report.ar:.4f}")
    return report
