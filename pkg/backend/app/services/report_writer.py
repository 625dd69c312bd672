import csv
import logging
import os
from typing import Dict, List, Optional

from reportlab.graphics import renderSVG
from reportlab.graphics.charts.lineplots import LinePlot
from reportlab.graphics.shapes import Drawing, String
from reportlab.lib import colors

from ..core.exceptions import RunDirectoryError
from ..models.schemas import ComparisonReport
from .analysis import AggregatedSeries, VariantSeries

logger = logging.getLogger(__name__)

SERIES_COLUMNS = ["timestamp_ms", "value", "variant", "metric", "provenance"]
CHART_METRICS = ["latency_ms", "cpu_pct", "heap_pct", "input_throughput_msg_s"]
_PALETTE = [colors.HexColor(c) for c in ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")]
_CHART_MAX_POINTS = 600


def _fmt(value: Optional[float], digits: int = 3) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def render_summary(report: ComparisonReport) -> str:
    """Markdown summary table, winner line, trade-off note and p-value matrix"""
    lines = [
        f"# Experiment {report.experiment_id}",
        "",
        f"Baseline: `{report.baseline}`. Objective: {report.objective.value}. Significance level: {report.alpha:g}.",
        "",
        "| variant | role | rank | QoS | latency ms | throughput msg/s | cpu % | heap % | recoveries | recovery max ms |",
        "|---|---|---|---|---|---|---|---|---|---|",
    ]
    for summary in report.variants:
        rank = str(report.ranking.index(summary.name) + 1) if summary.name in report.ranking else "-"
        if summary.failed:
            qos = "failed"
        else:
            qos = "pass" if summary.qos_passed else "fail"
        s = summary.stats
        recoveries = s.get("recoveries")
        lines.append(
            f"| {summary.name} | {summary.role} | {rank} | {qos} | {_fmt(s.get('latency_ms'))} "
            f"| {_fmt(s.get('throughput_msg_s'))} | {_fmt(s.get('cpu_pct'))} | {_fmt(s.get('heap_pct'))} "
            f"| {int(recoveries) if recoveries is not None else '-'} | {_fmt(s.get('recovery_max_ms'))} |"
        )
    lines.append("")
    lines.append(f"Winner: `{report.winner}`" if report.winner else "Winner: none")
    lines.append("")
    lines.append(f"Trade-off: {report.tradeoff_note}")
    if report.failed_variants:
        lines.append("")
        lines.append(f"Failed variants: {', '.join(report.failed_variants)}")

    names = sorted(report.significance)
    if len(names) > 1:
        lines += ["", "## Pairwise p-values", "", "| | " + " | ".join(names) + " |",
                  "|---" * (len(names) + 1) + "|"]
        for a in names:
            cells = ["-" if a == b else f"{report.significance[a].get(b, 1.0):.4g}" for b in names]
            lines.append(f"| {a} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def write_series_csv(series: AggregatedSeries, path: str) -> int:
    provenance = ">".join(series.provenance)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(SERIES_COLUMNS)
        for ts, value in zip(series.timestamps, series.values):
            writer.writerow([ts, repr(value), series.variant, series.name, provenance])
    return len(series)


def write_chart(metric: str, variants: List[AggregatedSeries], path: str) -> bool:
    lines = [s for s in variants if len(s)]
    if not lines:
        return False
    drawing = Drawing(720, 360)
    plot = LinePlot()
    plot.x, plot.y, plot.width, plot.height = 60, 50, 620, 250
    data = []
    for series in lines:
        stride = max(1, len(series) // _CHART_MAX_POINTS)
        data.append([(ts / 3600000.0, v) for ts, v in zip(series.timestamps[::stride], series.values[::stride])])
    plot.data = data
    for i in range(len(lines)):
        plot.lines[i].strokeColor = _PALETTE[i % len(_PALETTE)]
        plot.lines[i].strokeWidth = 1.2
    drawing.add(plot)
    drawing.add(String(60, 330, f"{metric} (smoothed) over simulated hours", fontSize=12))
    for i, series in enumerate(lines):
        drawing.add(String(60 + 140 * i, 20, series.variant, fontSize=9, fillColor=_PALETTE[i % len(_PALETTE)]))
    renderSVG.drawToFile(drawing, path)
    return True


def write_report(
    report: ComparisonReport,
    series: Dict[str, VariantSeries],
    out_dir: str,
    charts: bool = False,
) -> List[str]:
    """report.json, summary.md, one CSV per (metric, variant) and optionally SVG charts"""
    try:
        os.makedirs(os.path.join(out_dir, "series"), exist_ok=True)
    except OSError as e:
        raise RunDirectoryError(f"cannot create report directory ({e})", out_dir)

    written = []
    report_path = os.path.join(out_dir, "report.json")
    with open(report_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(report.model_dump_json(indent=2))
        f.write("\n")
    written.append(report_path)

    summary_path = os.path.join(out_dir, "summary.md")
    with open(summary_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(render_summary(report))
    written.append(summary_path)

    for name in sorted(series):
        for metric, smoothed in sorted(series[name].smoothed.items()):
            path = os.path.join(out_dir, "series", f"{metric}__{name}.csv")
            write_series_csv(smoothed, path)
            written.append(path)

    if charts:
        os.makedirs(os.path.join(out_dir, "charts"), exist_ok=True)
        for metric in CHART_METRICS:
            lines = [series[n].smoothed[metric] for n in sorted(series) if metric in series[n].smoothed]
            path = os.path.join(out_dir, "charts", f"{metric}.svg")
            if write_chart(metric, lines, path):
                written.append(path)
    logger.info(f"Wrote {len(written)} report files to {out_dir}")
    return written


def read_report(path: str) -> ComparisonReport:
    with open(path, "r", encoding="utf-8") as f:
        return ComparisonReport.model_validate_json(f.read())
