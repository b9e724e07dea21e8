"""
Trainer Module
Loss composition, the warm-up gated training loop, checkpoints and model evaluation
"""

import copy
import json
import math
import random
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from loguru import logger
from torch.optim.lr_scheduler import MultiStepLR
from torch.utils.data import DataLoader

from src.comparison.contrast_loss import (
    LabeledEmbeddingBatch, cls_contrast_loss, comparable, roi_contrast_loss
)
from src.data.annotation_io import SceneRecord
from src.data.scene_dataset import SceneDataset, collate_scenes
from src.detector.backbone import ConfigError
from src.detector.roi_head import filter_background
from src.detector.two_stage_detector import DetectorTrainOutput, TwoStageDetector
from src.evaluation.detection_evaluator import EvalReport, evaluate
from src.geometry.box_ops import Box, Detection, augmented_views
from src.memory.memory_bank import ClassMemoryBank

from .config import EvaluationConfig, ExperimentConfig, TrainConfig, validate_config


CHECKPOINT_FORMAT_VERSION = 1
COMPARISON_COMPONENTS = ("roi_compare", "cls_compare")


class NonFiniteLossError(FloatingPointError):
    """A loss component is NaN or infinite"""

    def __init__(self, component: str, value: float):
        super().__init__(f"Loss component '{component}' is not finite ({value})")
        self.component = component
        self.value = value


class TrainingDivergedError(RuntimeError):
    """Training stopped; ``checkpoint`` is the last good state on disk, if any"""

    def __init__(self, message: str, checkpoint: Optional[Path] = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class LossBreakdown:
    """Total loss tensor plus the weighted components that enter it"""
    total: torch.Tensor
    components: Dict[str, float]
    raw: Dict[str, float] = field(default_factory=dict)

    @property
    def logged_total(self) -> float:
        return math.fsum(self.components.values())


@dataclass
class TrainResult:
    output_dir: Path
    metrics_path: Path
    last_checkpoint: Path
    best_checkpoint: Optional[Path]
    best_ap50: Optional[float]
    epochs_completed: int
    history: List[Dict] = field(default_factory=list)


def _check_finite(name: str, value: torch.Tensor) -> float:
    as_float = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
    if not math.isfinite(as_float):
        raise NonFiniteLossError(name, as_float)
    return as_float


def compose_loss(base: Mapping[str, torch.Tensor], l_roi: Optional[torch.Tensor],
                 l_cls: Optional[torch.Tensor], cfg: TrainConfig, warmup: bool = False) -> LossBreakdown:
    """Base detector losses plus the weighted comparison terms.

    A comparison term is left out during warm-up, when its input was empty
    (``None``) or when its weight is zero.
    """
    if not base:
        raise ValueError("compose_loss needs at least one base loss component")

    terms: List[torch.Tensor] = []
    components: Dict[str, float] = {}
    for name, value in base.items():
        components[name] = _check_finite(name, value)
        terms.append(value)

    raw: Dict[str, float] = {}
    for name, value, weight in (("roi_compare", l_roi, cfg.lambda_roi), ("cls_compare", l_cls, cfg.lambda_cls)):
        if value is not None:
            raw[name] = _check_finite(name, value)
        if warmup or value is None or weight == 0:
            components[name] = 0.0
            continue
        weighted = weight * value
        components[name] = float(weighted.detach())
        terms.append(weighted)

    return LossBreakdown(total=sum(terms[1:], terms[0]), components=components, raw=raw)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def _nonzero_rows(batch: LabeledEmbeddingBatch) -> LabeledEmbeddingBatch:
    """Rows whose embedding can be normalized"""
    keep = batch.embeddings.detach().norm(dim=1) > 0
    if bool(keep.all()):
        return batch
    logger.debug(f"Dropping {int((~keep).sum())} zero-norm embeddings from a comparison")
    return batch.select(keep)


def scene_loader(records: Sequence[SceneRecord], batch_size: int, shuffle: bool = False,
                 seed: int = 0, num_workers: int = 0) -> DataLoader:
    generator = torch.Generator().manual_seed(seed) if shuffle else None
    return DataLoader(
        SceneDataset(records), batch_size=batch_size, shuffle=shuffle, generator=generator,
        num_workers=num_workers, collate_fn=collate_scenes,
    )


def predict(model: TwoStageDetector, records: Sequence[SceneRecord], eval_cfg: EvaluationConfig,
            device: torch.device) -> List[List[Detection]]:
    """Detections for every record, in record order"""
    was_training = model.training
    model.eval()
    detections: List[List[Detection]] = []
    try:
        for images, _, _, _ in scene_loader(records, eval_cfg.batch_size):
            detections.extend(model.detect(
                images.to(device), eval_cfg.score_threshold, eval_cfg.nms_iou, eval_cfg.max_detections,
            ))
    finally:
        model.train(was_training)
    return detections


def evaluate_model(model: TwoStageDetector, records: Sequence[SceneRecord], eval_cfg: EvaluationConfig,
                   device: torch.device, class_names: Optional[List[str]] = None) -> EvalReport:
    detections = predict(model, records, eval_cfg, device)
    return evaluate(
        detections, [record.gt for record in records], num_classes=model.num_classes,
        class_names=class_names, max_detections=eval_cfg.max_detections,
    )


def load_checkpoint(path) -> Dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=False)
    version = state.get("format_version") if isinstance(state, dict) else None
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint format version {version!r}")
    return state


def load_model(path, device: str = "cpu") -> Tuple[TwoStageDetector, Dict]:
    """Detector restored from a checkpoint, in eval mode"""
    state = load_checkpoint(path)
    config = validate_config(state["config"])
    model = TwoStageDetector(state["num_classes"], config.effective_detector())
    model.load_state_dict(state["model"])
    model.to(torch.device(device)).eval()
    return model, state


class Trainer:
    """Trains the detector with RoI-level and class-level comparison"""

    def __init__(self, config: ExperimentConfig, num_classes: int,
                 class_names: Optional[List[str]] = None, output_dir=None):
        self.config = config
        self.cfg = config.training
        self.num_classes = num_classes
        self.class_names = class_names
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.device = torch.device(self.cfg.device)

        seed_everything(self.cfg.seed)
        detector_cfg = config.effective_detector()
        self.model = TwoStageDetector(num_classes, detector_cfg).to(self.device)
        self.optimizer = torch.optim.SGD(
            self.model.parameters(), lr=self.cfg.lr, momentum=self.cfg.momentum,
            weight_decay=self.cfg.weight_decay,
        )
        self.scheduler = MultiStepLR(self.optimizer, milestones=self.cfg.lr_decay_epochs,
                                     gamma=self.cfg.lr_decay_factor)
        self.bank = ClassMemoryBank(num_classes, self.cfg.Q, dim=detector_cfg.representation_size,
                                    thresholds=self.cfg.tau_c)
        self.aug_rng = np.random.default_rng([self.cfg.seed, 1])
        self.bank_generator = torch.Generator().manual_seed(self.cfg.seed)

        self.epoch = 0
        self.global_step = 0
        self.best_ap50: Optional[float] = None
        self._last_good: Optional[Dict] = None

        logger.info(
            f"Trainer ready: {num_classes} classes, epochs={self.cfg.epochs}, warmup={self.cfg.warmup_epochs}, "
            f"lambda=({self.cfg.lambda_roi}, {self.cfg.lambda_cls}), tau=({self.cfg.tau_roi}, {self.cfg.tau_cls}), "
            f"Q={self.cfg.Q}"
        )

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def in_warmup(self, epoch: int) -> bool:
        return epoch < self.cfg.warmup_epochs

    # Comparison inputs

    def _augment(self, boxes: torch.Tensor, labels: torch.Tensor,
                 image_size: Tuple[int, int]) -> Tuple[torch.Tensor, torch.Tensor]:
        height, width = image_size
        source = [Box(*b) for b in boxes.tolist()]
        views, sources = augmented_views(source, self.cfg.k0, self.cfg.augmentations_per_gt,
                                         self.aug_rng, image_size=(width, height))
        aug = torch.tensor([v.as_xyxy() for v in views], dtype=boxes.dtype, device=boxes.device).reshape(-1, 4)
        return aug, labels[torch.as_tensor(sources, dtype=torch.long, device=labels.device)]

    def roi_compare_loss(self, out: DetectorTrainOutput, gt_boxes: Sequence[torch.Tensor],
                         gt_labels: Sequence[torch.Tensor], image_size: Tuple[int, int]) -> Optional[torch.Tensor]:
        """GT and augmented-GT E1 embeddings against foreground RoI E1 embeddings"""
        foreground, roi_embeddings = filter_background(out.rois, out.heads.roi_embeddings)
        key_labels = foreground.assigned_class
        if self.cfg.ric_exclude_injected_gt:
            proposals = ~foreground.is_gt
            roi_embeddings, key_labels = roi_embeddings[proposals], key_labels[proposals]
        keys = _nonzero_rows(LabeledEmbeddingBatch(roi_embeddings, key_labels))

        query_boxes, query_labels = [], []
        for boxes, labels in zip(gt_boxes, gt_labels):
            boxes, labels = boxes.to(self.device), labels.to(self.device)
            if self.cfg.use_box_augmentation and len(boxes):
                aug_boxes, aug_labels = self._augment(boxes, labels, image_size)
                boxes, labels = torch.cat((boxes, aug_boxes)), torch.cat((labels, aug_labels))
            query_boxes.append(boxes)
            query_labels.append(labels)
        if not sum(len(b) for b in query_boxes) or not len(keys):
            return None

        queries = _nonzero_rows(LabeledEmbeddingBatch(
            self.model.embed_boxes(out.projected, query_boxes), torch.cat(query_labels)
        ))
        if not comparable(queries, keys):
            return None
        return roi_contrast_loss(queries, keys, self.cfg.tau_roi, self.cfg.normalize_positives)

    def cls_compare_loss(self, out: DetectorTrainOutput) -> Optional[torch.Tensor]:
        """Current foreground class embeddings against the memory-bank view"""
        foreground, class_embeddings = filter_background(out.rois, out.heads.class_embeddings)
        current = _nonzero_rows(LabeledEmbeddingBatch(class_embeddings, foreground.assigned_class))
        if self.cfg.bank_view == "balanced":
            view = self.bank.sample_balanced(self.cfg.per_class_sample, self.bank_generator)
        else:
            view = self.bank.snapshot()
        if not comparable(current, view):
            return None
        view = LabeledEmbeddingBatch(view.embeddings.to(self.device, current.embeddings.dtype),
                                     view.labels.to(self.device))
        return cls_contrast_loss(current, view, self.cfg.tau_cls, self.cfg.normalize_positives)

    def update_bank(self, out: DetectorTrainOutput) -> int:
        """Insert confident foreground class embeddings; returns the number inserted"""
        foreground, embeddings, probs = filter_background(
            out.rois, out.heads.class_embeddings.detach(), out.heads.class_scores.detach()
        )
        if self.cfg.bank_label_source == "gt":
            labels = foreground.assigned_class
        else:
            labels = probs[:, : self.num_classes].argmax(dim=1)
        scores = probs.gather(1, labels[:, None]).squeeze(1)

        keep = embeddings.norm(dim=1) > 0
        batch = LabeledEmbeddingBatch(embeddings[keep].cpu(), labels[keep].cpu())
        return self.bank.update_from_batch(batch, scores[keep].cpu())

    # Loop

    def train_step(self, images: torch.Tensor, gt_boxes: Sequence[torch.Tensor],
                   gt_labels: Sequence[torch.Tensor], epoch: int) -> Dict:
        """One optimization step; returns the metrics record for the step"""
        images = images.to(self.device)
        gt_boxes = [b.to(self.device) for b in gt_boxes]
        gt_labels = [lb.to(self.device) for lb in gt_labels]
        warmup = self.in_warmup(epoch)
        lr = self.lr

        out = self.model(images, gt_boxes, gt_labels)
        try:
            for name, value in out.losses.items():
                _check_finite(name, value)
        except NonFiniteLossError as e:
            raise self._diverged(str(e)) from e

        l_roi = l_cls = None
        if not warmup:
            if self.cfg.use_roi_compare and self.cfg.lambda_roi > 0:
                l_roi = self.roi_compare_loss(out, gt_boxes, gt_labels, tuple(images.shape[-2:]))
            if self.cfg.use_cls_compare and self.cfg.lambda_cls > 0:
                l_cls = self.cls_compare_loss(out)

        try:
            breakdown = compose_loss(out.losses, l_roi, l_cls, self.cfg, warmup=warmup)
        except NonFiniteLossError as e:
            raise self._diverged(str(e)) from e
        if breakdown.logged_total > self.cfg.divergence_threshold:
            raise self._diverged(
                f"total loss {breakdown.logged_total:.4g} exceeds {self.cfg.divergence_threshold:g} "
                f"(components: {breakdown.components})"
            )

        self._last_good = copy.deepcopy(self.state_dict())

        self.optimizer.zero_grad()
        breakdown.total.backward()
        self.optimizer.step()

        inserted = 0
        if not warmup and self.cfg.use_cls_compare:
            inserted = self.update_bank(out)

        record = {
            "step": self.global_step,
            "epoch": epoch,
            "lr": lr,
            "warmup": warmup,
            "losses": breakdown.components,
            "total": breakdown.logged_total,
            "comparison_raw": breakdown.raw,
            "num_foreground": int(out.rois.foreground_mask.sum()),
            "bank_inserted": inserted,
            "bank_sizes": self.bank.queue_lengths(),
        }
        self.global_step += 1
        return record

    def _diverged(self, reason: str) -> TrainingDivergedError:
        """Error carrying the state before the most recent step with finite losses, if any"""
        checkpoint = None
        if self.output_dir is not None and self._last_good is not None:
            checkpoint = self.output_dir / "last_good.pt"
            torch.save(self._last_good, checkpoint)
        logger.error(f"Training diverged at step {self.global_step}: {reason}; last good checkpoint: {checkpoint}")
        return TrainingDivergedError(f"Training diverged at step {self.global_step}: {reason}", checkpoint)

    def fit(self, train_records: Sequence[SceneRecord],
            val_records: Optional[Sequence[SceneRecord]] = None) -> TrainResult:
        """Train from the current epoch to ``epochs``, checkpointing every epoch"""
        if self.output_dir is None:
            raise ConfigError("Trainer needs an output directory to fit")
        if not len(train_records):
            raise ValueError("Training set is empty")
        self.output_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = self.output_dir / "metrics.jsonl"
        history: List[Dict] = []
        best_path = self.output_dir / "best.pt"

        with open(metrics_path, "a" if self.global_step else "w", encoding="utf-8") as metrics_log:
            for epoch in range(self.epoch, self.cfg.epochs):
                started = time.time()
                self.model.train()
                loader = scene_loader(train_records, self.cfg.batch_size, shuffle=True,
                                      seed=self.cfg.seed * 100003 + epoch, num_workers=self.cfg.num_workers)
                totals: List[float] = []
                for images, boxes, labels, _ in loader:
                    record = self.train_step(images, boxes, labels, epoch)
                    metrics_log.write(json.dumps(record) + "\n")
                    totals.append(record["total"])
                    if record["step"] % self.cfg.log_every == 0:
                        logger.debug(
                            f"step {record['step']} epoch {epoch} lr {record['lr']:.2e} "
                            f"total {record['total']:.4f} {record['losses']}"
                        )
                metrics_log.flush()

                self.scheduler.step()
                self.epoch = epoch + 1

                summary = {
                    "epoch": epoch,
                    "mean_total": float(np.mean(totals)),
                    "lr": self.optimizer.param_groups[0]["lr"],
                    "bank_sizes": self.bank.queue_lengths(),
                    "seconds": round(time.time() - started, 2),
                }
                if val_records and self.config.evaluation.evaluate_every_epoch:
                    report = evaluate_model(self.model, val_records, self.config.evaluation,
                                            self.device, self.class_names)
                    summary["val_ap50"] = report.ap50
                    if self.best_ap50 is None or report.ap50 > self.best_ap50:
                        self.best_ap50 = report.ap50
                        self.save_checkpoint(best_path)
                history.append(summary)
                logger.info(f"Epoch {epoch + 1}/{self.cfg.epochs} finished: {summary}")

                epoch_path = self.save_checkpoint(self.output_dir / f"epoch_{epoch:03d}.pt")
                shutil.copyfile(epoch_path, self.output_dir / "last.pt")

        return TrainResult(
            output_dir=self.output_dir,
            metrics_path=metrics_path,
            last_checkpoint=self.output_dir / "last.pt",
            best_checkpoint=best_path if best_path.exists() else None,
            best_ap50=self.best_ap50,
            epochs_completed=self.epoch,
            history=history,
        )

    # Checkpoints

    def state_dict(self) -> Dict:
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "epoch": self.epoch,
            "global_step": self.global_step,
            "best_ap50": self.best_ap50,
            "num_classes": self.num_classes,
            "class_names": self.class_names,
            "config": self.config.model_dump(mode="json"),
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict(),
            "memory_bank": self.bank.state_dict(),
            "rng": {
                "torch": torch.get_rng_state(),
                "augmentation": self.aug_rng.bit_generator.state,
                "bank_sampling": self.bank_generator.get_state(),
            },
        }

    def save_checkpoint(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict(), path)
        logger.debug(f"Checkpoint saved: {path}")
        return path

    def load_state_dict(self, state: Dict) -> None:
        if state["num_classes"] != self.num_classes:
            raise ConfigError(
                f"Checkpoint has {state['num_classes']} classes, trainer has {self.num_classes}"
            )
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.scheduler.load_state_dict(state["scheduler"])
        self.bank = ClassMemoryBank.from_state_dict(state["memory_bank"])
        self.epoch = state["epoch"]
        self.global_step = state["global_step"]
        self.best_ap50 = state.get("best_ap50")
        torch.set_rng_state(state["rng"]["torch"])
        self.aug_rng.bit_generator.state = state["rng"]["augmentation"]
        self.bank_generator.set_state(state["rng"]["bank_sampling"])
        logger.info(f"Resumed at epoch {self.epoch}, step {self.global_step}")

    @classmethod
    def resume(cls, checkpoint, config: Optional[ExperimentConfig] = None, output_dir=None) -> "Trainer":
        state = load_checkpoint(checkpoint)
        config = config or validate_config(state["config"])
        trainer = cls(config, state["num_classes"], state.get("class_names"), output_dir)
        trainer.load_state_dict(state)
        return trainer
