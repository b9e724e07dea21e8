"""
Tests for loss composition, the training loop, checkpoints and model evaluation
"""

import itertools
import json
import math
import warnings

import numpy as np
import pytest
import torch

import src.orchestrator.trainer as trainer_module
from src.detector.backbone import ConfigError
from src.orchestrator.config import TrainConfig
from src.orchestrator.trainer import (
    NonFiniteLossError, Trainer, TrainingDivergedError, compose_loss, evaluate_model, load_checkpoint,
    load_model, scene_loader
)

from tests.conftest import tiny_experiment


CLASS_NAMES = ["class_0", "class_1", "class_2"]
BASE_COMPONENTS = {"rpn_objectness", "rpn_box", "roi_cls", "roi_reg"}


def read_metrics(path):
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def run(tmp_path, name, records, **training):
    trainer = Trainer(tiny_experiment(tmp_path, **training), 3, CLASS_NAMES, tmp_path / name)
    result = trainer.fit(records)
    return trainer, result, read_metrics(result.metrics_path)


@pytest.fixture(scope="module")
def train_records(tiny_manifest):
    return tiny_manifest.load_split("train").scenes


@pytest.fixture(scope="module")
def val_records(tiny_manifest):
    return tiny_manifest.load_split("val").scenes


class TestComposeLoss:
    def test_weighted_sum(self):
        breakdown = compose_loss({"base": torch.tensor(1.0)}, torch.tensor(2.0), torch.tensor(3.0), TrainConfig())
        assert breakdown.total.item() == pytest.approx(3.3)
        assert breakdown.components == pytest.approx({"base": 1.0, "roi_compare": 2.0, "cls_compare": 0.3})
        assert breakdown.raw == {"roi_compare": 2.0, "cls_compare": 3.0}

    def test_zero_weights_reduce_to_base(self):
        base = {"rpn": torch.tensor(0.7), "roi_cls": torch.tensor(0.2)}
        cfg = TrainConfig(lambda_roi=0.0, lambda_cls=0.0)
        breakdown = compose_loss(base, torch.tensor(5.0), torch.tensor(3.0), cfg)
        assert breakdown.total.item() == (base["rpn"] + base["roi_cls"]).item()
        assert breakdown.components["roi_compare"] == 0.0 and breakdown.components["cls_compare"] == 0.0

    def test_warmup_reduces_to_base(self):
        base = {"rpn": torch.tensor(0.7), "roi_cls": torch.tensor(0.2)}
        breakdown = compose_loss(base, torch.tensor(5.0), torch.tensor(3.0), TrainConfig(), warmup=True)
        assert breakdown.total.item() == (base["rpn"] + base["roi_cls"]).item()

    def test_empty_inputs_contribute_zero(self):
        breakdown = compose_loss({"base": torch.tensor(1.5)}, None, None, TrainConfig())
        assert breakdown.total.item() == 1.5
        assert breakdown.components == {"base": 1.5, "roi_compare": 0.0, "cls_compare": 0.0}
        assert breakdown.raw == {}

    def test_gradients_reach_weighted_terms(self):
        roi = torch.tensor(2.0, requires_grad=True)
        cls_ = torch.tensor(3.0, requires_grad=True)
        compose_loss({"base": torch.tensor(1.0)}, roi, cls_, TrainConfig()).total.backward()
        assert roi.grad.item() == pytest.approx(1.0)
        assert cls_.grad.item() == pytest.approx(0.1)

    def test_nan_component_is_named(self):
        with pytest.raises(NonFiniteLossError) as info:
            compose_loss({"rpn_box": torch.tensor(float("nan"))}, None, None, TrainConfig())
        assert info.value.component == "rpn_box"
        with pytest.raises(NonFiniteLossError, match="cls_compare"):
            compose_loss({"base": torch.tensor(1.0)}, None, torch.tensor(float("inf")), TrainConfig())

    def test_empty_base(self):
        with pytest.raises(ValueError):
            compose_loss({}, None, None, TrainConfig())

    def test_logged_total_is_component_sum(self):
        base = {"a": torch.tensor(0.1), "b": torch.tensor(0.2), "c": torch.tensor(0.3)}
        breakdown = compose_loss(base, torch.tensor(0.7), torch.tensor(0.9), TrainConfig())
        assert breakdown.logged_total == math.fsum(breakdown.components.values())
        assert abs(breakdown.logged_total - breakdown.total.item()) < 1e-6

    def test_components_from_graph_tensors_without_warnings(self):
        base = {"base": torch.tensor(1.0, requires_grad=True) * 2}
        roi = torch.tensor(0.5, requires_grad=True) * 1
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            breakdown = compose_loss(base, roi, None, TrainConfig())
        assert breakdown.components["base"] == 2.0
        assert breakdown.total.requires_grad


class TestComparisonTerms:
    def test_roi_comparison_trains_projection(self, tmp_path, train_records):
        trainer = Trainer(tiny_experiment(tmp_path, ric_exclude_injected_gt=False), 3, CLASS_NAMES)
        images, boxes, labels, _ = next(iter(scene_loader(train_records, 2)))
        out = trainer.model(images, boxes, labels)
        loss = trainer.roi_compare_loss(out, boxes, labels, tuple(images.shape[-2:]))
        assert loss is not None and torch.isfinite(loss)
        loss.backward()
        assert trainer.model.e1.conv.weight.grad.abs().sum() > 0

    def test_class_comparison_needs_bank_entries(self, tmp_path, train_records):
        trainer = Trainer(tiny_experiment(tmp_path), 3, CLASS_NAMES)
        images, boxes, labels, _ = next(iter(scene_loader(train_records, 2)))
        out = trainer.model(images, boxes, labels)
        assert trainer.cls_compare_loss(out) is None

        assert trainer.update_bank(out) > 0
        loss = trainer.cls_compare_loss(out)
        assert loss is not None and loss.requires_grad
        assert all(not e.embedding.requires_grad for c in range(3) for e in trainer.bank.entries(c))

    def test_terms_use_the_shared_loss_functions(self, tmp_path, train_records, monkeypatch):
        calls = {"filter_background": 0, "roi_contrast_loss": 0, "cls_contrast_loss": 0}

        def counting(name):
            original = getattr(trainer_module, name)

            def wrapper(*args, **kwargs):
                calls[name] += 1
                return original(*args, **kwargs)
            return wrapper

        for name in calls:
            monkeypatch.setattr(trainer_module, name, counting(name))

        trainer = Trainer(tiny_experiment(tmp_path, ric_exclude_injected_gt=False), 3, CLASS_NAMES)
        images, boxes, labels, _ = next(iter(scene_loader(train_records, 2)))
        out = trainer.model(images, boxes, labels)
        trainer.update_bank(out)
        assert trainer.roi_compare_loss(out, boxes, labels, tuple(images.shape[-2:])) is not None
        assert trainer.cls_compare_loss(out) is not None
        assert calls == {"filter_background": 3, "roi_contrast_loss": 1, "cls_contrast_loss": 1}


class TestOptimizationStep:
    @staticmethod
    def objective(trainer, images, boxes, labels, with_class_term=False):
        torch.manual_seed(123)
        trainer.aug_rng = np.random.default_rng(5)
        trainer.bank_generator.manual_seed(5)
        out = trainer.model(images, boxes, labels)
        l_roi = trainer.roi_compare_loss(out, boxes, labels, tuple(images.shape[-2:]))
        l_cls = trainer.cls_compare_loss(out) if with_class_term else None
        return compose_loss(out.losses, l_roi, l_cls, trainer.cfg), l_roi, l_cls

    def test_one_step_lowers_the_total_loss(self, tmp_path, train_records):
        images, boxes, labels, _ = next(iter(scene_loader(train_records, 2)))
        lowered = 0
        for seed in range(10):
            trainer = Trainer(tiny_experiment(tmp_path, seed=seed, warmup_epochs=0, ric_exclude_injected_gt=False),
                              3, CLASS_NAMES)
            with torch.no_grad():
                before = self.objective(trainer, images, boxes, labels)[0].logged_total

            torch.manual_seed(123)
            trainer.aug_rng = np.random.default_rng(5)
            record = trainer.train_step(images, boxes, labels, epoch=0)
            assert record["losses"]["roi_compare"] > 0
            assert record["total"] == pytest.approx(before, rel=1e-5)

            with torch.no_grad():
                after = self.objective(trainer, images, boxes, labels)[0].logged_total
            lowered += after < before
        assert lowered >= 8

    def test_total_loss_gradients_match_central_differences(self, tmp_path, monkeypatch):
        torch.manual_seed(0)
        images = torch.rand(2, 3, 64, 64, dtype=torch.float64)
        boxes = [torch.tensor([[8.0, 8.0, 30.0, 28.0], [34.0, 30.0, 60.0, 58.0]], dtype=torch.float64),
                 torch.tensor([[10.0, 36.0, 28.0, 60.0]], dtype=torch.float64)]
        labels = [torch.tensor([0, 1]), torch.tensor([2])]

        trainer = Trainer(tiny_experiment(tmp_path, warmup_epochs=0, ric_exclude_injected_gt=False),
                          3, CLASS_NAMES)
        trainer.model.double()
        with torch.no_grad():
            torch.manual_seed(7)
            assert trainer.update_bank(trainer.model(images, boxes, labels)) > 0
            torch.manual_seed(123)
            frozen = trainer.model(images, boxes, labels).proposals

        # proposals carry no gradient; hold them fixed while weights move
        calls = itertools.count()
        monkeypatch.setattr(trainer.model.rpn, "_propose",
                            lambda *args, **kwargs: frozen[next(calls) % len(frozen)])

        breakdown, l_roi, l_cls = self.objective(trainer, images, boxes, labels, with_class_term=True)
        assert l_roi is not None and l_cls is not None
        trainer.model.zero_grad()
        breakdown.total.backward()

        params = {
            "backbone.body.0.weight": 6, "backbone.body.6.weight": 6,
            "rpn.conv.weight": 6, "rpn.cls_logits.weight": 4, "rpn.bbox_pred.weight": 4,
            "e1.conv.weight": 8, "shared_head.fc6.weight": 6, "predictor.cls_score.weight": 6,
        }
        named = dict(trainer.model.named_parameters())
        rng = np.random.default_rng(0)
        eps = 1e-6
        checked = 0
        for name, count in params.items():
            param = named[name]
            flat = param.data.view(-1)
            for index in rng.choice(flat.numel(), size=count, replace=False).tolist():
                analytic = param.grad.view(-1)[index].item()
                original = flat[index].item()
                with torch.no_grad():
                    flat[index] = original + eps
                    up = self.objective(trainer, images, boxes, labels, True)[0].total.item()
                    flat[index] = original - eps
                    down = self.objective(trainer, images, boxes, labels, True)[0].total.item()
                    flat[index] = original
                numeric = (up - down) / (2 * eps)
                assert abs(numeric - analytic) <= 1e-3 * max(abs(numeric), abs(analytic)) + 1e-6, name
                checked += 1
        assert checked == sum(params.values())


class TestTraining:
    def test_records(self, tmp_path, train_records):
        trainer, result, records = run(tmp_path, "run", train_records)
        assert len(records) == 2 * 3
        assert [r["step"] for r in records] == list(range(6))
        for record in records:
            assert set(record["losses"]) == BASE_COMPONENTS | {"roi_compare", "cls_compare"}
            assert abs(record["total"] - sum(record["losses"].values())) < 1e-9
            assert all(math.isfinite(v) for v in record["losses"].values())
        assert result.epochs_completed == 2
        assert result.last_checkpoint.exists()
        assert (tmp_path / "run" / "epoch_000.pt").exists()
        assert result.best_checkpoint is None

    def test_class_comparison_active_after_warmup(self, tmp_path, train_records):
        trainer, _, records = run(tmp_path, "run", train_records)
        warm = [r for r in records if r["epoch"] == 0]
        after = [r for r in records if r["epoch"] == 1]
        assert all(r["warmup"] and r["bank_inserted"] == 0 for r in warm)
        assert all(r["losses"]["roi_compare"] == 0.0 and r["losses"]["cls_compare"] == 0.0 for r in warm)
        assert any(r["losses"]["cls_compare"] != 0.0 for r in after)
        assert trainer.bank.total_inserted > 0

    def test_warmup_for_all_epochs_is_baseline(self, tmp_path, train_records):
        trainer, _, records = run(tmp_path, "run", train_records, warmup_epochs=2)
        assert all(r["losses"]["roi_compare"] == 0.0 and r["losses"]["cls_compare"] == 0.0 for r in records)
        assert trainer.bank.total_inserted == 0

    def test_same_seed_same_curves(self, tmp_path, train_records):
        _, first, _ = run(tmp_path, "a", train_records)
        _, second, _ = run(tmp_path, "b", train_records)
        assert first.metrics_path.read_text() == second.metrics_path.read_text()

    def test_zero_weights_match_baseline_build(self, tmp_path, train_records):
        _, _, weighted = run(tmp_path, "zero", train_records, lambda_roi=0.0, lambda_cls=0.0)
        _, _, baseline = run(tmp_path, "base", train_records, use_roi_compare=False,
                             use_box_augmentation=False, use_cls_compare=False)
        assert [r["total"] for r in weighted] == [r["total"] for r in baseline]
        assert [r["losses"] for r in weighted] == [r["losses"] for r in baseline]

    def test_learning_rate_schedule(self, tmp_path, train_records):
        _, _, records = run(tmp_path, "run", train_records, epochs=3, lr_decay_epochs=[1, 2])
        by_epoch = {r["epoch"]: r["lr"] for r in records}
        assert by_epoch[0] == pytest.approx(0.005)
        assert by_epoch[1] == pytest.approx(0.0005)
        assert by_epoch[2] == pytest.approx(0.00005)

    def test_best_checkpoint_from_validation(self, tmp_path, train_records, val_records):
        config = tiny_experiment(tmp_path, epochs=1, warmup_epochs=1)
        config = config.with_overrides({"evaluation.evaluate_every_epoch": True})
        result = Trainer(config, 3, CLASS_NAMES, tmp_path / "run").fit(train_records, val_records)
        assert result.best_checkpoint is not None and result.best_checkpoint.exists()
        assert 0.0 <= result.best_ap50 <= 1.0
        assert "val_ap50" in result.history[0]

    def test_divergence_on_first_step_has_no_good_checkpoint(self, tmp_path, train_records):
        trainer = Trainer(tiny_experiment(tmp_path, divergence_threshold=1e-6), 3, CLASS_NAMES, tmp_path / "run")
        with pytest.raises(TrainingDivergedError) as info:
            trainer.fit(train_records)
        assert info.value.checkpoint is None
        assert not (tmp_path / "run" / "last_good.pt").exists()

    def test_nan_weights_from_the_start(self, tmp_path, train_records):
        trainer = Trainer(tiny_experiment(tmp_path), 3, CLASS_NAMES, tmp_path / "run")
        with torch.no_grad():
            trainer.model.predictor.cls_score.weight.fill_(float("nan"))
        with pytest.raises(TrainingDivergedError) as info:
            trainer.fit(train_records)
        assert info.value.checkpoint is None

    def test_divergence_keeps_last_finite_state(self, tmp_path, train_records, monkeypatch):
        trainer = Trainer(tiny_experiment(tmp_path), 3, CLASS_NAMES, tmp_path / "run")
        original_step = trainer.train_step
        calls = []

        def corrupting_step(*args, **kwargs):
            calls.append(1)
            if len(calls) == 3:
                with torch.no_grad():
                    trainer.model.predictor.cls_score.weight.fill_(float("nan"))
            return original_step(*args, **kwargs)

        monkeypatch.setattr(trainer, "train_step", corrupting_step)
        with pytest.raises(TrainingDivergedError) as info:
            trainer.fit(train_records)

        assert info.value.checkpoint == tmp_path / "run" / "last_good.pt"
        state = load_checkpoint(info.value.checkpoint)
        assert state["global_step"] == 1
        assert all(torch.isfinite(value).all() for value in state["model"].values() if value.is_floating_point())

    def test_fit_preconditions(self, tmp_path, train_records):
        with pytest.raises(ConfigError):
            Trainer(tiny_experiment(tmp_path), 3, CLASS_NAMES).fit(train_records)
        with pytest.raises(ValueError):
            Trainer(tiny_experiment(tmp_path), 3, CLASS_NAMES, tmp_path / "run").fit([])


class TestCheckpoints:
    def test_contents(self, tmp_path, train_records):
        _, result, _ = run(tmp_path, "run", train_records, epochs=1)
        state = load_checkpoint(result.last_checkpoint)
        assert state["format_version"] == 1
        assert (state["epoch"], state["global_step"], state["num_classes"]) == (1, 3, 3)
        assert state["class_names"] == CLASS_NAMES
        assert {"model", "optimizer", "scheduler", "memory_bank", "rng", "config"} <= set(state)

    def test_version_check(self, tmp_path):
        path = tmp_path / "old.pt"
        torch.save({"format_version": 0}, path)
        with pytest.raises(ConfigError):
            load_checkpoint(path)
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "missing.pt")

    def test_resume_continues_identically(self, tmp_path, train_records):
        _, _, full = run(tmp_path, "full", train_records, epochs=2)
        _, partial, _ = run(tmp_path, "part", train_records, epochs=1)

        resumed = Trainer.resume(partial.last_checkpoint, tiny_experiment(tmp_path, epochs=2), tmp_path / "resumed")
        assert (resumed.epoch, resumed.global_step) == (1, 3)
        result = resumed.fit(train_records)
        continued = read_metrics(result.metrics_path)

        expected = [r for r in full if r["epoch"] == 1]
        assert [r["step"] for r in continued] == [r["step"] for r in expected]
        for got, want in zip(continued, expected):
            assert got["total"] == pytest.approx(want["total"], rel=1e-6)
            assert got["bank_sizes"] == want["bank_sizes"]

    def test_class_count_mismatch(self, tmp_path, train_records):
        _, result, _ = run(tmp_path, "run", train_records, epochs=1)
        trainer = Trainer(tiny_experiment(tmp_path), 2, CLASS_NAMES[:2])
        with pytest.raises(ConfigError):
            trainer.load_state_dict(load_checkpoint(result.last_checkpoint))

    def test_untrained_model_metrics(self, tmp_path, train_records, tiny_manifest):
        _, result, _ = run(tmp_path, "run", train_records, epochs=1)
        model, state = load_model(result.last_checkpoint)
        assert not model.training
        test = tiny_manifest.load_split("test").scenes
        config = tiny_experiment(tmp_path)
        first = evaluate_model(model, test, config.evaluation, torch.device("cpu"), CLASS_NAMES)
        second = evaluate_model(model, test, config.evaluation, torch.device("cpu"), CLASS_NAMES)
        assert first == second
        for value in (first.ap, first.ap50, first.ap75, first.ar):
            assert math.isfinite(value) and 0.0 <= value <= 1.0
