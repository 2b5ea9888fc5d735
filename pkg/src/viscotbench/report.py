"""Plot-ready CSV reports from sweep records.

Rendered tables show percentages with one decimal; each has a *_raw.csv
twin carrying full-precision fractions. All files use dot decimals and a
header row.
"""

from __future__ import annotations

import csv
from pathlib import Path

from .errors import UndefinedMetricError
from .harness import GroupStats, PERTURBATION_ORDER, aggregate
from .metrics import pdr as pdr_metric

__all__ = ["write_reports", "REPORT_FILES"]

REPORT_FILES = (
    "pdr_table.csv",
    "pdr_table_raw.csv",
    "accuracy_table.csv",
    "accuracy_table_raw.csv",
    "severity_curves.csv",
    "entropy_summary.csv",
    "iou_vs_pdr.csv",
)


def _fmt_pct(value: float | None) -> str:
    return "" if value is None else f"{value * 100.0:.1f}"


def _fmt_raw(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def _pooled(stats: list[GroupStats]):
    """Accuracy pooled over severities per (dataset, paradigm, perturbation),
    plus the clean accuracy and clean mean IoU per (dataset, paradigm)."""
    acc_cells: dict[tuple, tuple[float, int]] = {}
    clean_acc: dict[tuple, float] = {}
    clean_iou: dict[tuple, float] = {}
    for st in stats:
        group = (st.dataset, st.paradigm)
        if st.perturbation is None:
            if st.accuracy is not None:
                clean_acc[group] = st.accuracy
            if st.mean_iou is not None:
                clean_iou[group] = st.mean_iou
            continue
        if st.accuracy is None:
            continue
        key = (st.dataset, st.paradigm, st.perturbation)
        total, count = acc_cells.get(key, (0.0, 0))
        acc_cells[key] = (total + st.accuracy * st.n, count + st.n)
    pooled = {key: total / count for key, (total, count) in acc_cells.items() if count}
    return pooled, clean_acc, clean_iou


def _write_csv(path: Path, header: list[str], rows: list[list[str]]):
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _table_rows(stats, pooled, clean_acc, cell_fn, fmt):
    groups = sorted({(st.dataset, st.paradigm) for st in stats})
    rows = []
    for dataset, paradigm in groups:
        row = [dataset, paradigm, fmt(clean_acc.get((dataset, paradigm)))]
        for kind in PERTURBATION_ORDER:
            row.append(fmt(cell_fn(dataset, paradigm, kind)))
        rows.append(row)
    return rows


def write_reports(stats: list[GroupStats], out_dir) -> list[Path]:
    """Emit the report CSV set; raises UndefinedMetricError on no data."""
    if not stats:
        raise UndefinedMetricError("no records to report on")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pooled, clean_acc, clean_iou = _pooled(stats)

    def acc_cell(dataset, paradigm, kind):
        return pooled.get((dataset, paradigm, kind))

    def pdr_cell(dataset, paradigm, kind):
        acc = pooled.get((dataset, paradigm, kind))
        base = clean_acc.get((dataset, paradigm))
        if acc is None or base is None or base <= 0:
            return None
        return pdr_metric(base, acc)

    written = []
    header = ["dataset", "paradigm", "clean"] + list(PERTURBATION_ORDER)
    for name, fmt in (("accuracy_table.csv", _fmt_pct), ("accuracy_table_raw.csv", _fmt_raw)):
        path = out_dir / name
        _write_csv(path, header, _table_rows(stats, pooled, clean_acc, acc_cell, fmt))
        written.append(path)

    pdr_header = ["dataset", "paradigm"] + list(PERTURBATION_ORDER)
    for name, fmt in (("pdr_table.csv", _fmt_pct), ("pdr_table_raw.csv", _fmt_raw)):
        rows = []
        for dataset, paradigm in sorted({(st.dataset, st.paradigm) for st in stats}):
            row = [dataset, paradigm]
            for kind in PERTURBATION_ORDER:
                row.append(fmt(pdr_cell(dataset, paradigm, kind)))
            rows.append(row)
        path = out_dir / name
        _write_csv(path, pdr_header, rows)
        written.append(path)

    curve_rows = []
    for st in stats:
        if st.perturbation is None:
            continue
        curve_rows.append(
            [st.dataset, st.paradigm, st.perturbation, str(st.severity), _fmt_raw(st.accuracy)]
        )
    path = out_dir / "severity_curves.csv"
    _write_csv(path, ["dataset", "paradigm", "perturbation", "severity", "accuracy"], curve_rows)
    written.append(path)

    entropy_rows = []
    for st in stats:
        if st.mean_entropy is None:
            continue
        entropy_rows.append(
            [
                st.dataset,
                st.paradigm,
                st.perturbation or "clean",
                "" if st.severity is None else str(st.severity),
                _fmt_raw(st.mean_entropy),
                str(st.n),
            ]
        )
    path = out_dir / "entropy_summary.csv"
    _write_csv(
        path,
        ["dataset", "paradigm", "perturbation", "severity", "mean_entropy_nats", "n"],
        entropy_rows,
    )
    written.append(path)

    scatter_rows = []
    for st in stats:
        if st.perturbation is None or st.pdr is None or st.mean_iou is None:
            continue
        base_iou = clean_iou.get((st.dataset, st.paradigm))
        if base_iou is None:
            continue
        scatter_rows.append(
            [
                st.dataset,
                st.paradigm,
                st.perturbation,
                str(st.severity),
                _fmt_raw(base_iou - st.mean_iou),
                _fmt_raw(st.pdr),
            ]
        )
    path = out_dir / "iou_vs_pdr.csv"
    _write_csv(
        path,
        ["dataset", "paradigm", "perturbation", "severity", "iou_degradation", "pdr"],
        scatter_rows,
    )
    written.append(path)
    return written


def report_from_records(records_path, out_dir, attention_path=None) -> list[Path]:
    """Aggregate a results file and emit the full report CSV set."""
    stats = aggregate(records_path, attention_path=attention_path)
    return write_reports(stats, out_dir)
