"""
Report Generator Module
Writes evaluation reports and sweep tables in multiple formats
"""

import json
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd
import plotly.graph_objects as go
from jinja2 import Template
from loguru import logger
from plotly.subplots import make_subplots

from src.evaluation.detection_evaluator import EvalReport


HTML_TEMPLATE = """
<!DOCTYPE html>
<html lang="en">
<head>
    <meta charset="UTF-8">
    <meta name="viewport" content="width=device-width, initial-scale=1.0">
    <title>{{ title }}</title>
    <style>
        body {
            font-family: 'Arial', sans-serif;
            margin: 0;
            padding: 20px;
            background-color: #f5f5f5;
        }
        .header {
            background: linear-gradient(135deg, #667eea 0%, #764ba2 100%);
            color: white;
            padding: 30px;
            border-radius: 10px;
            margin-bottom: 30px;
        }
        .header h1 { margin: 0; font-size: 2.2em; }
        .header p { margin: 10px 0 0 0; opacity: 0.9; }
        .summary-cards {
            display: grid;
            grid-template-columns: repeat(auto-fit, minmax(200px, 1fr));
            gap: 20px;
            margin-bottom: 30px;
        }
        .card {
            background: white;
            padding: 20px;
            border-radius: 10px;
            box-shadow: 0 2px 10px rgba(0,0,0,0.1);
            border-left: 4px solid #667eea;
        }
        .card h3 { margin: 0 0 10px 0; color: #333; }
        .card .value { font-size: 2em; font-weight: bold; color: #667eea; }
        .section {
            background: white;
            padding: 30px;
            border-radius: 10px;
            margin-bottom: 30px;
            box-shadow: 0 2px 10px rgba(0,0,0,0.1);
        }
        table { border-collapse: collapse; width: 100%; }
        th, td { padding: 8px 12px; border-bottom: 1px solid #ddd; text-align: right; }
        th:first-child, td:first-child { text-align: left; }
    </style>
</head>
<body>
    <div class="header">
        <h1>{{ title }}</h1>
        <p>{{ timestamp }} &middot; {{ num_images }} images</p>
    </div>

    <div class="summary-cards">
        {% for name, value in summary.items() %}
        <div class="card"><h3>{{ name }}</h3><div class="value">{{ "%.3f"|format(value) }}</div></div>
        {% endfor %}
    </div>

    <div class="section">
        <h2>Per-class results</h2>
        <table>
            <tr>{% for column in columns %}<th>{{ column }}</th>{% endfor %}</tr>
            {% for row in rows %}
            <tr>{% for column in columns %}<td>{{ row[column] }}</td>{% endfor %}</tr>
            {% endfor %}
        </table>
    </div>

    {% for chart in charts.values() %}
    <div class="section">{{ chart }}</div>
    {% endfor %}
</body>
</html>
"""


class ReportGenerator:
    """Evaluation reports (JSON / CSV / HTML) and sweep tables"""

    def __init__(self, config=None):
        self.report_formats = list(getattr(config, "format", ["json", "csv"]))
        self.include_charts = getattr(config, "include_charts", True)
        self.title = getattr(config, "title", "cellcompare evaluation")

    def generate_eval_report(self, report: EvalReport, out_path, metrics_log: Optional[Path] = None) -> Dict[str, str]:
        """Write the report in every configured format; JSON always goes to ``out_path``"""
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        logger.info("Generating evaluation report")

        generated = {"json": self.generate_json_report(report, out_path)}
        if "csv" in self.report_formats:
            generated["csv"] = self.generate_csv_report(report, out_path.with_suffix(".csv"))
        if "html" in self.report_formats:
            generated["html"] = self.generate_html_report(report, out_path.with_suffix(".html"), metrics_log)

        logger.info(f"Generated {len(generated)} report formats")
        return generated

    def generate_json_report(self, report: EvalReport, path: Path) -> str:
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(report.to_dict(), f, indent=2, ensure_ascii=False)
        logger.info(f"JSON report generated: {path}")
        return str(path)

    @staticmethod
    def per_class_frame(report: EvalReport) -> pd.DataFrame:
        """One row per class with GT plus an ``all`` aggregate row"""
        rows = [
            {
                "class_id": class_id,
                "class_name": report.class_name(class_id),
                "num_gt": report.num_gt.get(class_id, 0),
                "ap50": report.per_class_ap50[class_id],
                "ap": report.per_class_ap[class_id],
                "ar": report.per_class_ar[class_id],
            }
            for class_id in sorted(report.per_class_ap50)
        ]
        rows.append({
            "class_id": "all",
            "class_name": "all",
            "num_gt": sum(report.num_gt.values()),
            "ap50": report.ap50,
            "ap": report.ap,
            "ar": report.ar,
        })
        return pd.DataFrame(rows, columns=["class_id", "class_name", "num_gt", "ap50", "ap", "ar"])

    def generate_csv_report(self, report: EvalReport, path: Path) -> str:
        self.per_class_frame(report).to_csv(path, index=False)
        logger.info(f"CSV report generated: {path}")
        return str(path)

    def generate_html_report(self, report: EvalReport, path: Path, metrics_log: Optional[Path] = None) -> str:
        frame = self.per_class_frame(report).round(4)
        charts: Dict[str, str] = {}
        if self.include_charts:
            charts["per_class"] = self._create_per_class_chart(frame.iloc[:-1])
            if metrics_log is not None:
                loss_chart = self._create_loss_chart(load_metrics(metrics_log))
                if loss_chart:
                    charts["losses"] = loss_chart

        html = Template(HTML_TEMPLATE).render(
            title=self.title,
            timestamp=datetime.now().isoformat(timespec="seconds"),
            num_images=report.num_images,
            summary={"AP": report.ap, "AP50": report.ap50, "AP75": report.ap75, "AR": report.ar},
            columns=list(frame.columns),
            rows=frame.to_dict(orient="records"),
            charts=charts,
        )
        with open(path, 'w', encoding='utf-8') as f:
            f.write(html)
        logger.info(f"HTML report generated: {path}")
        return str(path)

    def _create_per_class_chart(self, frame: pd.DataFrame) -> str:
        fig = go.Figure(data=[
            go.Bar(name="AP50", x=frame["class_name"], y=frame["ap50"], marker_color="#667eea"),
            go.Bar(name="AP", x=frame["class_name"], y=frame["ap"], marker_color="#764ba2"),
            go.Bar(name="AR", x=frame["class_name"], y=frame["ar"], marker_color="#2ca02c"),
        ])
        fig.update_layout(title="Per-class results", barmode="group", yaxis_range=[0, 1],
                          width=800, height=400)
        return fig.to_html(include_plotlyjs='cdn', div_id='per-class')

    def _create_loss_chart(self, metrics: pd.DataFrame) -> str:
        if metrics.empty:
            return ""
        components = [c for c in metrics.columns if c.startswith("losses.")]
        fig = make_subplots(rows=1, cols=2, subplot_titles=("Loss components", "Learning rate"))
        for column in components:
            fig.add_trace(go.Scatter(x=metrics["step"], y=metrics[column], mode="lines",
                                     name=column.split(".", 1)[1]), row=1, col=1)
        fig.add_trace(go.Scatter(x=metrics["step"], y=metrics["total"], mode="lines", name="total"), row=1, col=1)
        fig.add_trace(go.Scatter(x=metrics["step"], y=metrics["lr"], mode="lines", name="lr",
                                 showlegend=False), row=1, col=2)
        fig.update_yaxes(type="log", row=1, col=2)
        fig.update_layout(title="Training curves", width=1000, height=400)
        return fig.to_html(include_plotlyjs='cdn', div_id='training-curves')

    def write_sweep_table(self, rows: Sequence[Dict[str, Any]], path) -> pd.DataFrame:
        """Sweep rows as CSV, plus a per-configuration mean over seeds"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        table = pd.DataFrame(list(rows))
        table.to_csv(path, index=False)
        logger.info(f"Sweep table written: {path} ({len(table)} rows)")

        summary = summarize_sweep(table)
        if not summary.empty:
            summary_path = path.with_name(f"{path.stem}_summary.csv")
            summary.to_csv(summary_path, index=False)
            logger.info(f"Sweep summary written: {summary_path}")
        return table


def load_metrics(path) -> pd.DataFrame:
    """Per-step metrics log flattened into columns (``losses.<name>``)"""
    records: List[Dict] = []
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            if line.strip():
                records.append(json.loads(line))
    if not records:
        return pd.DataFrame()
    return pd.json_normalize(records)


def summarize_sweep(table: pd.DataFrame) -> pd.DataFrame:
    """Mean and std of every metric column per grid cell, over seeds"""
    if table.empty or "status" not in table.columns:
        return pd.DataFrame()
    ok = table[table["status"] == "ok"]
    if ok.empty:
        return pd.DataFrame()
    metric_columns = [c for c in ok.columns if c in ("ap50", "ap75", "ap", "ar") or c.startswith("ap50_")]
    config_columns = [c for c in ok.columns if c not in metric_columns and c not in ("seed", "status", "error")]
    grouped = ok.groupby(config_columns, sort=True, dropna=False)[metric_columns]
    summary = grouped.mean().add_suffix("_mean").join(grouped.std(ddof=0).add_suffix("_std"))
    summary["runs"] = grouped.size()
    return summary.reset_index()
