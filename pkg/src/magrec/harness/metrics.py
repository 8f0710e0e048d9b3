"""Logloss, AUC and the per-domain metrics report."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from magrec.autograd.functional import BCE_CLAMP
from magrec.errors import UndefinedMetricError


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve via the Mann-Whitney rank sum (ties count half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores)  # average ranks for ties
    # rank sum minus its minimum counts concordant pairs, with ties contributing 0.5
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_or_none(scores, labels) -> float | None:
    try:
        return auc(scores, labels)
    except UndefinedMetricError:
        return None


def logloss(scores: Sequence[float], labels: Sequence[int]) -> float:
    p = np.clip(np.asarray(scores, dtype=np.float64), BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    if p.size == 0:
        raise ValueError("logloss of an empty set")
    return float(np.mean(-y * np.log(p) - (1.0 - y) * np.log1p(-p)))


@dataclass
class ScopeMetrics:
    logloss: float
    auc: float | None
    n_samples: int


@dataclass
class MetricsReport:
    overall: ScopeMetrics
    per_domain: dict[int, ScopeMetrics] = field(default_factory=dict)
    seed: int = 0
    epoch: int = 0

    @classmethod
    def from_predictions(cls, scores, labels, domains, seed: int = 0, epoch: int = 0) -> "MetricsReport":
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels)
        domains = np.asarray(domains)
        per_domain = {}
        for d in np.unique(domains):
            mask = domains == d
            per_domain[int(d)] = ScopeMetrics(logloss(scores[mask], labels[mask]), auc_or_none(scores[mask], labels[mask]), int(mask.sum()))
        overall = ScopeMetrics(logloss(scores, labels), auc_or_none(scores, labels), len(scores))
        return cls(overall, per_domain, seed, epoch)

    def all_auc_absent(self) -> bool:
        return self.overall.auc is None and all(m.auc is None for m in self.per_domain.values())

    def rows(self, prefix: str = "") -> list[tuple[str, str, str, str, int]]:
        """``(scope, domain, metric, value, n)`` rows; an absent AUC has an empty value."""
        out = []

        def emit(scope, domain, m: ScopeMetrics):
            out.append((prefix + scope, domain, "logloss", repr(m.logloss), m.n_samples))
            out.append((prefix + scope, domain, "auc", "" if m.auc is None else repr(m.auc), m.n_samples))

        for d in sorted(self.per_domain):
            emit("domain", str(d), self.per_domain[d])
        emit("overall", "all", self.overall)
        return out
