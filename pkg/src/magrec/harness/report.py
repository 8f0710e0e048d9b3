"""Metric tables: a CSV file (``scope,domain,metric,value,n``) and a plain-text rendering."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Iterable, Sequence

from magrec.harness.metrics import MetricsReport

CSV_HEADER = ("scope", "domain", "metric", "value", "n")

Row = tuple[str, str, str, str, int]


def report_rows(reports: Iterable[tuple[str, MetricsReport]]) -> list[Row]:
    """Flatten ``(scope_prefix, report)`` pairs into CSV rows."""
    rows: list[Row] = []
    for prefix, report in reports:
        rows.extend(report.rows(prefix))
    return rows


def write_csv(rows: Sequence[Row], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        writer.writerows(rows)


def read_csv(path: str | Path) -> list[Row]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [(s, d, m, v, int(n)) for s, d, m, v, n in reader]


def format_table(rows: Sequence[Row]) -> str:
    """Aligned text table; absent AUC values print as ``n/a``."""
    header = list(CSV_HEADER)
    body = [[s, d, m, f"{float(v):.4f}" if v else "n/a", str(n)] for s, d, m, v, n in rows]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    out = io.StringIO()
    for r in [header, ["-" * w for w in widths], *body]:
        out.write("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() + "\n")
    return out.getvalue()


def write_history(history: Sequence[MetricsReport], train_loss: Sequence[float], path: str | Path) -> None:
    """Per-epoch ``epoch,train_loss,val_logloss,val_auc`` log."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("epoch", "train_loss", "val_logloss", "val_auc"))
        for report, loss in zip(history, train_loss):
            auc = "" if report.overall.auc is None else repr(report.overall.auc)
            writer.writerow((report.epoch, repr(loss), repr(report.overall.logloss), auc))
