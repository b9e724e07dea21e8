"""
Main Orchestrator Module
Coordinates dataset generation, training, evaluation and sweeps
"""

import itertools
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

import pandas as pd
import yaml
from loguru import logger

from src.data.annotation_io import Manifest, load_manifest
from src.data.scene_generator import DatasetSpec, generate_dataset
from src.detector.backbone import ConfigError
from src.evaluation.detection_evaluator import EvalReport
from src.reporting.report_generator import ReportGenerator

from .config import ExperimentConfig, load_config, load_dataset_spec, qualify_key, read_yaml
from .trainer import Trainer, TrainResult, evaluate_model, load_model


TEMPERATURE_KEY = "tau"
SEED_KEY = "seed"
VARIANTS_KEY = "variants"


@dataclass
class SweepCell:
    """One grid point run under one seed"""
    index: int
    overrides: Dict[str, Any]
    seed: int
    variant: str = ""

    @property
    def name(self) -> str:
        suffix = f"_{self.variant}" if self.variant else ""
        return f"cell_{self.index:03d}{suffix}_seed{self.seed}"


def _qualified(key: str, value: Any) -> Dict[str, Any]:
    if key == TEMPERATURE_KEY:
        return {"training.tau_roi": value, "training.tau_cls": value}
    return {qualify_key(key): value}


def expand_grid(grid: Mapping[str, Any], default_seed: int) -> List[SweepCell]:
    """Cartesian product of the grid.

    ``tau`` sets both temperatures, ``seed`` repeats each point and ``variants``
    is a list of named override sets crossed with the remaining keys.
    """
    if not grid:
        raise ConfigError("Sweep grid is empty")
    grid = dict(grid)
    seeds = grid.pop(SEED_KEY, grid.pop(f"training.{SEED_KEY}", [default_seed]))
    seeds = seeds if isinstance(seeds, list) else [seeds]
    variants = grid.pop(VARIANTS_KEY, [{}])
    if not variants:
        raise ConfigError("Sweep 'variants' list is empty")

    keys = list(grid)
    values = []
    for key in keys:
        options = grid[key] if isinstance(grid[key], list) else [grid[key]]
        if not options:
            raise ConfigError(f"Sweep key '{key}' has no values")
        values.append(options)

    cells = []
    index = 0
    for variant in variants:
        variant = dict(variant)
        variant_name = str(variant.pop("name", ""))
        for combo in itertools.product(*values):
            overrides: Dict[str, Any] = {}
            for key, value in variant.items():
                overrides.update(_qualified(key, value))
            for key, value in zip(keys, combo):
                overrides.update(_qualified(key, value))
            for seed in seeds:
                cells.append(SweepCell(index, overrides, int(seed), variant_name))
            index += 1
    return cells


class MainOrchestrator:
    """Main orchestrator for the cellcompare pipeline"""

    def __init__(self, config_path: Optional[str] = "config/config.yaml",
                 overrides: Optional[Mapping[str, Any]] = None):
        self.config_path = config_path
        self.config: ExperimentConfig = load_config(config_path, overrides)
        self.report_generator = ReportGenerator(self.config.reporting)

        self.performance_metrics = {
            'start_time': None,
            'generation_time': 0.0,
            'training_time': 0.0,
            'evaluation_time': 0.0,
        }

        logger.info("Main Orchestrator initialized")

    def _manifest(self, data: Optional[str]) -> Manifest:
        data = data or self.config.data.manifest
        if data is None:
            raise ConfigError("No dataset manifest given (use --data or data.manifest)")
        return load_manifest(data)

    def generate_data(self, spec_path: Optional[str], out_dir: str) -> Path:
        """Write a synthetic dataset; without a --spec file the config's data.spec is used"""
        started = time.time()
        spec: DatasetSpec = load_dataset_spec(spec_path) if spec_path else self.config.data.spec
        logger.info(
            f"Step 1: Generating dataset ({spec.num_classes} classes, frequencies "
            f"{spec.class_frequencies}, ambiguity {spec.ambiguity}) into {out_dir}"
        )
        try:
            manifest = generate_dataset(spec, out_dir)
        except Exception as e:
            logger.error(f"Error generating dataset: {e}")
            raise
        self.performance_metrics['generation_time'] = time.time() - started
        logger.info(f"Dataset written in {self.performance_metrics['generation_time']:.2f}s: {manifest}")
        return manifest

    def train(self, data: Optional[str], out_dir: str, resume: Optional[str] = None,
              config: Optional[ExperimentConfig] = None) -> TrainResult:
        """Train on the manifest's train split; val split (if any) drives best.pt"""
        config = config or self.config
        started = time.time()
        manifest = self._manifest(data)
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

        logger.info("Step 1: Loading dataset")
        train_set = manifest.load_split(config.data.train_split)
        val_set = None
        if config.data.val_split and config.data.val_split in manifest.splits:
            val_set = manifest.load_split(config.data.val_split)

        logger.info("Step 2: Building trainer")
        if resume:
            trainer = Trainer.resume(resume, config, out_dir)
            if trainer.num_classes != manifest.num_classes:
                raise ConfigError(
                    f"Checkpoint {resume} has {trainer.num_classes} classes, dataset has {manifest.num_classes}"
                )
        else:
            trainer = Trainer(config, manifest.num_classes, manifest.class_names, out_dir)
        with open(out_dir / "config.yaml", 'w', encoding='utf-8') as f:
            yaml.safe_dump(config.model_dump(mode="json"), f, sort_keys=False)

        logger.info(f"Step 3: Training on {len(train_set)} scenes")
        try:
            result = trainer.fit(train_set.scenes, val_set.scenes if val_set is not None else None)
        except Exception as e:
            logger.error(f"Error during training: {e}")
            raise

        self.performance_metrics['training_time'] = time.time() - started
        logger.info(f"Training completed in {self.performance_metrics['training_time']:.2f}s; "
                    f"last checkpoint {result.last_checkpoint}")
        return result

    def evaluate_checkpoint(self, checkpoint: str, data: Optional[str], out_path: Optional[str] = None,
                            split: Optional[str] = None) -> EvalReport:
        """Run inference over a split and write the evaluation report"""
        started = time.time()
        manifest = self._manifest(data)
        split = split or self.config.evaluation.split

        model, state = load_model(checkpoint, self.config.training.device)
        if state["num_classes"] != manifest.num_classes:
            raise ConfigError(
                f"Checkpoint {checkpoint} was trained with {state['num_classes']} classes, "
                f"dataset has {manifest.num_classes}"
            )

        logger.info(f"Evaluating {checkpoint} on split '{split}'")
        scenes = manifest.load_split(split)
        try:
            report = evaluate_model(model, scenes.scenes, self.config.evaluation, model_device(model),
                                    manifest.class_names)
        except Exception as e:
            logger.error(f"Error evaluating checkpoint: {e}")
            raise

        self.performance_metrics['evaluation_time'] = time.time() - started
        logger.info(f"AP={report.ap:.4f} AP50={report.ap50:.4f} AP75={report.ap75:.4f} AR={report.ar:.4f}")
        if out_path:
            metrics_log = Path(checkpoint).parent / "metrics.jsonl"
            self.report_generator.generate_eval_report(
                report, out_path, metrics_log if metrics_log.exists() else None
            )
        return report

    def sweep(self, grid_path: str, data: Optional[str], out_csv: str) -> pd.DataFrame:
        """Train and evaluate every grid cell; failed cells are recorded and skipped"""
        grid = read_yaml(grid_path)
        cells = expand_grid(grid, self.config.training.seed)
        manifest = self._manifest(data)
        out_csv = Path(out_csv)
        runs_dir = out_csv.parent / f"{out_csv.stem}_runs"
        logger.info(f"Sweep over {len(cells)} runs from {grid_path}")

        rows: List[Dict[str, Any]] = []
        for position, cell in enumerate(cells, start=1):
            row: Dict[str, Any] = {"cell": cell.index, "variant": cell.variant, "seed": cell.seed}
            row.update({
                key.split(".", 1)[1]: str(value) if isinstance(value, (list, dict)) else value
                for key, value in cell.overrides.items()
            })
            logger.info(f"Sweep run {position}/{len(cells)}: {cell.name} {cell.overrides}")
            try:
                config = self.config.with_overrides({**cell.overrides, "training.seed": cell.seed})
                result = self.train(data, runs_dir / cell.name, config=config)
                model, _ = load_model(result.last_checkpoint, config.training.device)
                report = evaluate_model(model, manifest.load_split(config.evaluation.split).scenes,
                                        config.evaluation, model_device(model), manifest.class_names)
                row.update(status="ok", error="", ap50=report.ap50, ap75=report.ap75, ap=report.ap, ar=report.ar)
                for class_id, value in sorted(report.per_class_ap50.items()):
                    row[f"ap50_{report.class_name(class_id)}"] = value
            except Exception as e:
                logger.error(f"Sweep run {cell.name} failed: {e}")
                row.update(status="failed", error=str(e))
            rows.append(row)

        table = self.report_generator.write_sweep_table(rows, out_csv)
        failed = sum(1 for row in rows if row["status"] != "ok")
        logger.info(f"Sweep finished: {len(rows) - failed} ok, {failed} failed; table {out_csv}")
        return table

    def validate_config(self) -> bool:
        """Check that the configured dataset manifest (if any) exists"""
        manifest = self.config.data.manifest
        if manifest and not Path(manifest).exists():
            logger.error(f"Configured manifest not found: {manifest}")
            return False
        logger.info("Configuration validation passed")
        return True


def model_device(model) -> Any:
    return next(model.parameters()).device
