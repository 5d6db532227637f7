"""Ranking metrics over per-user candidate groups: gAUC, NDCG@k, LogLoss."""
from __future__ import annotations

import csv
import io
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .ranker import bce


class UndefinedMetric(ValueError):
    pass


@dataclass
class ScoredGroup:
    user_id: str
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels differ in length")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("non-finite score")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be binary")


def group_by_user(user_ids: Sequence[str], scores, labels) -> List[ScoredGroup]:
    buckets: Dict[str, Tuple[list, list]] = OrderedDict()
    for u, s, y in zip(user_ids, scores, labels):
        b = buckets.setdefault(u, ([], []))
        b[0].append(s)
        b[1].append(y)
    return [ScoredGroup(u, np.array(s), np.array(y)) for u, (s, y) in buckets.items()]


def auc(scores, labels) -> float:
    """Fraction of correctly ordered (pos, neg) pairs, ties counted as half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC needs both a positive and a negative")
    ranks = rankdata(scores)  # average ranks give ties half credit
    return (ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def group_auc(groups: Iterable[ScoredGroup]) -> float:
    """Unweighted mean of per-user AUC; users lacking either class are skipped."""
    values = []
    for g in groups:
        n_pos = int(g.labels.sum())
        if 0 < n_pos < len(g.labels):
            values.append(auc(g.scores, g.labels))
    if not values:
        raise UndefinedMetric("group AUC is undefined: no user has both classes")
    return float(np.mean(values))


def ndcg(scores, labels, k: int) -> float:
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    rel = np.asarray(labels, dtype=np.float64)[order][:k]
    discounts = 1.0 / np.log2(np.arange(2, len(rel) + 2))
    dcg = float((rel * discounts).sum())
    n_ideal = min(k, int(np.sum(labels)))
    idcg = float(discounts[:n_ideal].sum())
    return dcg / idcg


def ndcg_at_k(groups: Iterable[ScoredGroup], k: int = 3) -> float:
    """Mean binary-relevance NDCG@k over users with at least one positive."""
    if k < 1:
        raise ValueError("k must be >= 1")
    values = [ndcg(g.scores, g.labels, k) for g in groups if g.labels.sum() > 0]
    if not values:
        raise UndefinedMetric("NDCG is undefined: no group has a positive")
    return float(np.mean(values))


def log_loss(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise UndefinedMetric("log loss of an empty set")
    return float(np.mean(bce(scores, labels)))


@dataclass
class EvalReport:
    gauc: float
    logloss: float
    ndcg3: float
    n_users: int
    n_instances: int
    extra: Dict[str, float] = field(default_factory=dict)

    def as_row(self) -> Dict[str, float]:
        return {"gauc": self.gauc, "logloss": self.logloss, "ndcg3": self.ndcg3,
                "n_users": self.n_users, "n_instances": self.n_instances, **self.extra}

    def table(self, title: str = "") -> str:
        lines = [title] if title else []
        lines += [
            f"{'gAUC':<10}{self.gauc:.4f}",
            f"{'LogLoss':<10}{self.logloss:.4f}",
            f"{'NDCG@3':<10}{self.ndcg3:.4f}",
            f"{'users':<10}{self.n_users}",
            f"{'instances':<10}{self.n_instances}",
        ]
        return "\n".join(lines)


def evaluate(user_ids: Sequence[str], scores, labels) -> EvalReport:
    groups = group_by_user(user_ids, scores, labels)
    return EvalReport(
        gauc=group_auc(groups),
        logloss=log_loss(scores, labels),
        ndcg3=ndcg_at_k(groups, 3),
        n_users=len(groups),
        n_instances=len(scores),
    )


def rows_to_csv(rows: List[Dict[str, object]]) -> str:
    out = io.StringIO()
    if not rows:
        return ""
    writer = csv.DictWriter(out, fieldnames=list(rows[0]))
    writer.writeheader()
    writer.writerows(rows)
    return out.getvalue()


def format_table(rows: List[Dict[str, object]], columns: Sequence[str]) -> str:
    """Plain fixed-width table for terminal output."""
    cells = [[str(c) for c in columns]]
    for r in rows:
        cells.append([f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in columns])
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
