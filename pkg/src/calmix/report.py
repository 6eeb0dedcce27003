"""Accuracy-vs-cost reports from a results directory.

For every dataset group: one CSV of raw and min-max normalized metrics, two
self-contained SVG scatter charts (accuracy against training time and
against throughput) and a relative-change section in ``report.md``.
"""

from __future__ import annotations

import csv
import itertools
import logging
import re
from collections import defaultdict
from dataclasses import dataclass
from html import escape
from pathlib import Path
from typing import Sequence

import numpy as np

from calmix.bench import MetricRecord, minmax_normalize, read_jsonl, relative_change

log = logging.getLogger(__name__)

__all__ = ["ReportRow", "build_report", "collect_rows", "render_scatter_svg"]

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf", "#7f7f7f")
CSV_COLUMNS = (
    "dataset", "backbone", "setting", "image_size", "runs",
    "top1", "train_time_min", "throughput_sps",
    "top1_norm", "train_time_norm", "throughput_norm",
)
FOOTER = (
    "Values are min-max normalized within each dataset; a column whose values "
    "are all equal normalizes to 0."
)


@dataclass
class ReportRow:
    dataset: str
    backbone: str
    setting: str
    image_size: int
    runs: int
    top1: float
    train_time_min: float
    throughput_sps: float
    top1_norm: float = 0.0
    train_time_norm: float = 0.0
    throughput_norm: float = 0.0

    @property
    def label(self) -> str:
        return f"{self.backbone}/{self.setting}/IS{self.image_size}"


def _load_records(results_dir: Path) -> list[MetricRecord]:
    records = []
    for path in sorted(results_dir.glob("*.jsonl")):
        for raw in read_jsonl(path):
            if raw.get("kind", "run") == "run" and not raw.get("diverged"):
                records.append(MetricRecord.from_dict(raw))
    # a rerun of the same seed supersedes the earlier line
    latest = {(r.config_id, r.seed): r for r in records}
    return list(latest.values())


def collect_rows(records: Sequence[MetricRecord]) -> dict[str, list[ReportRow]]:
    """Average seeds per configuration and normalize within each dataset."""
    by_config: dict[tuple, list[MetricRecord]] = defaultdict(list)
    for r in records:
        by_config[(r.dataset, r.backbone, r.setting, r.image_size)].append(r)
    groups: dict[str, list[ReportRow]] = defaultdict(list)
    for (dataset, backbone, setting, size), runs in sorted(by_config.items()):
        groups[dataset].append(
            ReportRow(
                dataset, backbone, setting, size, len(runs),
                float(np.mean([r.top1 for r in runs])),
                float(np.mean([r.train_time_min for r in runs])),
                float(np.mean([r.throughput_sps for r in runs])),
            )
        )
    for rows in groups.values():
        for axis, norm in (("top1", "top1_norm"), ("train_time_min", "train_time_norm"), ("throughput_sps", "throughput_norm")):
            for row, value in zip(rows, minmax_normalize([getattr(r, axis) for r in rows])):
                setattr(row, norm, value)
    return dict(groups)


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text) or "dataset"


def _series_key(rows: Sequence[ReportRow]):
    if len({r.setting for r in rows}) > 1:
        return lambda r: r.setting
    return lambda r: r.backbone


def render_scatter_svg(
    rows: Sequence[ReportRow],
    x_attr: str,
    x_label: str,
    title: str,
    width: int = 640,
    height: int = 480,
) -> str:
    """Normalized accuracy (y) against a normalized cost axis (x), one colour per series."""
    left, right, top, bottom = 64, 170, 40, 56
    plot_w = width - left - right
    plot_h = height - top - bottom
    key = _series_key(rows)
    series: dict[str, list[ReportRow]] = defaultdict(list)
    for row in rows:
        series[key(row)].append(row)

    def px(v: float) -> float:
        return left + v * plot_w

    def py(v: float) -> float:
        return top + (1.0 - v) * plot_h

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="#ffffff"/>',
        "<style>text{font-family:Helvetica,Arial,sans-serif;font-size:12px;fill:#222}</style>",
        f'<text x="{width / 2:.0f}" y="22" text-anchor="middle" style="font-size:14px">{escape(title)}</text>',
    ]
    for t in np.linspace(0.0, 1.0, 6):
        out.append(f'<line x1="{px(t):.1f}" y1="{top}" x2="{px(t):.1f}" y2="{top + plot_h}" stroke="#eee"/>')
        out.append(f'<line x1="{left}" y1="{py(t):.1f}" x2="{left + plot_w}" y2="{py(t):.1f}" stroke="#eee"/>')
        out.append(f'<text x="{px(t):.1f}" y="{top + plot_h + 16}" text-anchor="middle">{t:.1f}</text>')
        out.append(f'<text x="{left - 8}" y="{py(t) + 4:.1f}" text-anchor="end">{t:.1f}</text>')
    out.append(f'<rect x="{left}" y="{top}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444"/>')
    out.append(f'<text x="{left + plot_w / 2:.0f}" y="{height - 16}" text-anchor="middle">{escape(x_label)}</text>')
    out.append(
        f'<text x="18" y="{top + plot_h / 2:.0f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {top + plot_h / 2:.0f})">Accuracy (normalized)</text>'
    )
    for i, (name, members) in enumerate(sorted(series.items())):
        colour = PALETTE[i % len(PALETTE)]
        members = sorted(members, key=lambda r: getattr(r, x_attr))
        if len(members) > 1:
            pts = " ".join(f"{px(getattr(r, x_attr)):.1f},{py(r.top1_norm):.1f}" for r in members)
            out.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-opacity="0.5"/>')
        for r in members:
            out.append(
                f'<circle cx="{px(getattr(r, x_attr)):.1f}" cy="{py(r.top1_norm):.1f}" r="5" fill="{colour}">'
                f"<title>{escape(r.label)}: top1={r.top1:.4f}</title></circle>"
            )
        ly = top + 14 + 18 * i
        out.append(f'<circle cx="{left + plot_w + 18}" cy="{ly - 4}" r="5" fill="{colour}"/>')
        out.append(f'<text x="{left + plot_w + 30}" y="{ly}">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _write_csv(path: Path, rows: Sequence[ReportRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in rows:
            writer.writerow([getattr(r, c) for c in CSV_COLUMNS])


def _pct(baseline: float, variant: float) -> str:
    try:
        return f"{relative_change(baseline, variant):+.1f}%"
    except ZeroDivisionError:
        return "n/a"


def relative_change_rows(rows: Sequence[ReportRow]) -> list[tuple]:
    """Every ordered pair of settings sharing backbone and image size."""
    out = []
    shared = defaultdict(list)
    for r in rows:
        shared[(r.backbone, r.image_size)].append(r)
    for (backbone, size), members in sorted(shared.items()):
        for a, b in itertools.permutations(sorted(members, key=lambda r: r.setting), 2):
            out.append(
                (
                    backbone, size, a.setting, b.setting,
                    _pct(a.top1, b.top1),
                    _pct(a.train_time_min, b.train_time_min),
                    _pct(a.throughput_sps, b.throughput_sps),
                )
            )
    return out


def build_report(results_dir, out_dir=None, overwrite: bool = False) -> list[Path]:
    """Write the report files and return their paths.

    Raises ``FileNotFoundError`` when there are no usable run records and
    ``FileExistsError`` when outputs exist and ``overwrite`` is false.
    """
    results_dir = Path(results_dir)
    out_dir = Path(out_dir) if out_dir else results_dir / "report"
    records = _load_records(results_dir)
    if not records:
        raise FileNotFoundError(f"no run records under {results_dir}")
    if out_dir.exists() and any(out_dir.iterdir()) and not overwrite:
        raise FileExistsError(f"{out_dir} is not empty; pass --overwrite to replace it")
    out_dir.mkdir(parents=True, exist_ok=True)
    for stale in out_dir.iterdir():
        if stale.is_file():
            stale.unlink()

    written: list[Path] = []
    md = ["# Accuracy vs cost", ""]
    for dataset, rows in sorted(collect_rows(records).items()):
        if len(rows) < 2:
            log.warning("dataset %s has a single configuration; normalized values are all 0", dataset)
        slug = _slug(dataset)
        csv_path = out_dir / f"{slug}.csv"
        _write_csv(csv_path, rows)
        written.append(csv_path)
        for attr, label, suffix in (
            ("train_time_norm", "Training time (normalized)", "train_time"),
            ("throughput_norm", "Inference throughput (normalized)", "throughput"),
        ):
            svg_path = out_dir / f"{slug}_accuracy_vs_{suffix}.svg"
            svg_path.write_text(render_scatter_svg(rows, attr, label, f"{dataset}: accuracy vs {suffix.replace('_', ' ')}"))
            written.append(svg_path)
        md += [f"## {dataset}", "", "| backbone | IS | baseline | variant | top-1 | train time | throughput |", "|---|---|---|---|---|---|---|"]
        md += ["| " + " | ".join(str(c) for c in row) + " |" for row in relative_change_rows(rows)]
        md.append("")
    md += ["---", FOOTER, ""]
    md_path = out_dir / "report.md"
    md_path.write_text("\n".join(md))
    written.append(md_path)
    return written
