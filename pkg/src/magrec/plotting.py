"""PNG figures for training curves and experiment tables.

Figures are built on ``matplotlib.figure.Figure`` with the Agg canvas, so no
pyplot state or display is involved.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from matplotlib.ticker import MaxNLocator

from magrec.harness.metrics import MetricsReport

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "savefig.dpi": 120,
}

GOLDEN = (5 ** 0.5 - 1) / 2


def _figure(width: float = 5.0, ncols: int = 1) -> Figure:
    fig = Figure(figsize=(width, width * GOLDEN))
    FigureCanvasAgg(fig)
    fig.subplots(1, ncols)
    return fig


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # no Software tag, so identical runs give identical bytes
    fig.savefig(path, format="png", metadata={"Software": None})
    return path


def learning_curve(history: Sequence[MetricsReport], train_loss: Sequence[float], path: str | Path,
                   best_epoch: int | None = None) -> Path:
    """Train loss and validation logloss on the left, validation AUC on the right."""
    with matplotlib.rc_context(STYLE):
        fig = _figure(8.0, 2)
        left, right = fig.axes
        epochs = [r.epoch for r in history]
        left.plot(epochs, train_loss, marker="o", ms=3, label="train loss")
        left.plot(epochs, [r.overall.logloss for r in history], marker="o", ms=3, label="val logloss")
        left.set_xlabel("epoch")
        left.set_ylabel("logloss")
        left.legend()
        aucs = [(r.epoch, r.overall.auc) for r in history if r.overall.auc is not None]
        if aucs:
            right.plot(*zip(*aucs), marker="o", ms=3, color="C2")
        right.set_xlabel("epoch")
        right.set_ylabel("val AUC")
        for ax in (left, right):
            ax.xaxis.set_major_locator(MaxNLocator(integer=True))
            if best_epoch:
                ax.axvline(best_epoch, color="0.6", ls="--", lw=0.8)
        return _save(fig, path)


def per_domain_bars(report: MetricsReport, path: str | Path, title: str = "") -> Path:
    with matplotlib.rc_context(STYLE):
        fig = _figure(8.0, 2)
        left, right = fig.axes
        doms = sorted(report.per_domain)
        labels = [str(d) for d in doms] + ["all"]
        scopes = [report.per_domain[d] for d in doms] + [report.overall]
        left.bar(labels, [m.logloss for m in scopes], color="C0")
        left.set_ylabel("logloss")
        right.bar(labels, [m.auc if m.auc is not None else 0.0 for m in scopes], color="C1")
        right.set_ylabel("AUC")
        right.set_ylim(0.0, 1.0)
        for ax in (left, right):
            ax.set_xlabel("domain")
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def comparison_bars(labels: Sequence[str], reports: Sequence[MetricsReport], path: str | Path, title: str = "") -> Path:
    """Overall logloss and AUC per table row (ablation variant or representation)."""
    with matplotlib.rc_context(STYLE):
        fig = _figure(8.0, 2)
        left, right = fig.axes
        ll = [r.overall.logloss for r in reports]
        au = [r.overall.auc if r.overall.auc is not None else 0.0 for r in reports]
        left.barh(labels, ll, color="C0")
        left.set_xlabel("val logloss")
        left.set_xlim(min(ll) * 0.95, max(ll) * 1.02)
        right.barh(labels, au, color="C1")
        right.set_xlabel("val AUC")
        right.set_xlim(max(0.0, min(au) - 0.05), min(1.0, max(au) + 0.02))
        right.set_yticklabels([])
        if title:
            fig.suptitle(title)
        return _save(fig, path)
