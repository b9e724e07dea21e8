"""
Tests for evaluation reports, metrics logs and sweep tables
"""

import json

import pandas as pd
import pytest

from src.evaluation.detection_evaluator import EvalReport
from src.orchestrator.config import ReportingConfig
from src.reporting.report_generator import ReportGenerator, load_metrics, summarize_sweep


def sample_report() -> EvalReport:
    return EvalReport(
        ap=0.4, ap50=0.6, ap75=0.35, ar=0.5,
        per_class_ap50={0: 0.8, 2: 0.4},
        per_class_ap={0: 0.5, 2: 0.3},
        per_class_ar={0: 0.6, 2: 0.4},
        num_gt={0: 10, 1: 0, 2: 2},
        num_images=4,
        class_names=["normal", "rare", "atypical"],
    )


def write_metrics(path, records):
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record) + "\n")
    return path


class TestPerClassFrame:
    def test_rows(self):
        frame = ReportGenerator.per_class_frame(sample_report())
        assert frame["class_name"].tolist() == ["normal", "atypical", "all"]
        assert frame["num_gt"].tolist() == [10, 2, 12]
        assert frame.iloc[-1]["ap50"] == 0.6
        assert frame.iloc[1]["ar"] == 0.4


class TestEvalReport:
    def test_all_formats(self, tmp_path):
        generator = ReportGenerator(ReportingConfig(format=["json", "csv", "html"]))
        metrics = write_metrics(tmp_path / "metrics.jsonl", [
            {"step": 0, "epoch": 0, "lr": 0.005, "total": 2.0, "losses": {"roi_cls": 1.5, "roi_compare": 0.5}},
            {"step": 1, "epoch": 0, "lr": 0.005, "total": 1.5, "losses": {"roi_cls": 1.0, "roi_compare": 0.5}},
        ])
        generated = generator.generate_eval_report(sample_report(), tmp_path / "out" / "eval.json", metrics)
        assert set(generated) == {"json", "csv", "html"}

        payload = json.loads((tmp_path / "out" / "eval.json").read_text(encoding="utf-8"))
        assert payload["per_class_ap50"] == {"0": 0.8, "2": 0.4}
        table = pd.read_csv(tmp_path / "out" / "eval.csv")
        assert len(table) == 3
        html = (tmp_path / "out" / "eval.html").read_text(encoding="utf-8")
        assert "atypical" in html and "training-curves" in html

    def test_json_only(self, tmp_path):
        generator = ReportGenerator(ReportingConfig(format=["json"], include_charts=False))
        generated = generator.generate_eval_report(sample_report(), tmp_path / "eval.json")
        assert list(generated) == ["json"]
        assert not (tmp_path / "eval.csv").exists()


class TestMetrics:
    def test_loss_columns(self, tmp_path):
        path = write_metrics(tmp_path / "metrics.jsonl", [
            {"step": 0, "total": 1.0, "losses": {"rpn_box": 0.25, "cls_compare": 0.75}},
        ])
        frame = load_metrics(path)
        assert {"losses.rpn_box", "losses.cls_compare"} <= set(frame.columns)
        assert frame.loc[0, "losses.cls_compare"] == 0.75

    def test_empty_log(self, tmp_path):
        path = tmp_path / "metrics.jsonl"
        path.write_text("", encoding="utf-8")
        assert load_metrics(path).empty


class TestSweepTable:
    def rows(self):
        return [
            {"cell": 0, "variant": "", "seed": 0, "Q": 16, "status": "ok", "error": "", "ap50": 0.4, "ap": 0.2},
            {"cell": 0, "variant": "", "seed": 1, "Q": 16, "status": "ok", "error": "", "ap50": 0.6, "ap": 0.4},
            {"cell": 1, "variant": "", "seed": 0, "Q": 80, "status": "failed", "error": "boom"},
        ]

    def test_summary_over_seeds(self):
        summary = summarize_sweep(pd.DataFrame(self.rows()))
        assert len(summary) == 1
        assert summary.loc[0, "ap50_mean"] == pytest.approx(0.5)
        assert summary.loc[0, "ap50_std"] == pytest.approx(0.1)
        assert summary.loc[0, "runs"] == 2

    def test_all_failed(self):
        table = pd.DataFrame([{"cell": 0, "seed": 0, "status": "failed", "error": "x"}])
        assert summarize_sweep(table).empty
        assert summarize_sweep(pd.DataFrame()).empty

    def test_write(self, tmp_path):
        table = ReportGenerator().write_sweep_table(self.rows(), tmp_path / "tables" / "sweep.csv")
        assert len(table) == 3
        assert pd.read_csv(tmp_path / "tables" / "sweep.csv")["status"].tolist() == ["ok", "ok", "failed"]
        assert (tmp_path / "tables" / "sweep_summary.csv").exists()
