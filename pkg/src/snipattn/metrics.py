"""Ranking and classification metrics: ROC-AUC, PR-AUC, precision at fixed recall, per-class F1.

Tied scores form one operating point: ROC ties earn half credit and a tie
group enters the precision-recall curve all at once.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np


def _binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in length")
    if s.size == 0:
        raise ValueError("empty cohort")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("binary metrics need labels in {0, 1}")
    return s, y.astype(np.int64)


def roc_auc(scores, labels) -> float:
    """P(score of a positive > score of a negative) + half the tie probability."""
    s, y = _binary(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC-AUC needs at least one positive and one negative")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(s.size)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _operating_points(s: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (tp, fp) after each distinct threshold, highest score first."""
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    last = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    return tp[last], fp[last]


def pr_auc(scores, labels) -> float:
    """Average precision: sum over thresholds of recall gain times precision."""
    s, y = _binary(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("PR-AUC needs at least one positive")
    tp, fp = _operating_points(s, y)
    precision = tp / (tp + fp)
    recall_step = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(recall_step * precision))


def precision_at_recall(scores, labels, target: float = 0.95) -> float:
    """Best precision over operating points whose recall reaches ``target``."""
    s, y = _binary(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("precision at recall needs at least one positive")
    tp, fp = _operating_points(s, y)
    ok = tp / n_pos >= target
    return float(np.max(tp[ok] / (tp[ok] + fp[ok])))


class F1PerClass(NamedTuple):
    f1: np.ndarray
    absent: list[int]


def f1_per_class(predicted, truth, n_classes: int) -> F1PerClass:
    """One-vs-rest F1 per class.

    A class that is neither predicted nor present scores 0 and is listed in ``absent``.
    """
    p = np.asarray(predicted, dtype=np.int64).reshape(-1)
    t = np.asarray(truth, dtype=np.int64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"predictions {p.shape} and truth {t.shape} differ in length")
    f1 = np.zeros(n_classes)
    absent = []
    for c in range(n_classes):
        tp = int(np.sum((p == c) & (t == c)))
        fp = int(np.sum((p == c) & (t != c)))
        fn = int(np.sum((p != c) & (t == c)))
        if tp + fp + fn == 0:
            absent.append(c)
            continue
        f1[c] = 2 * tp / (2 * tp + fp + fn)
    return F1PerClass(f1, absent)


def macro_f1(predicted, truth, n_classes: int) -> float:
    return float(f1_per_class(predicted, truth, n_classes).f1.mean())


@dataclass
class EvalReport:
    task: str
    split: str
    metrics: dict
    per_class: dict
    cohort_size: int
    seed: int
    model: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"


def evaluate_probs(
    probs: np.ndarray,
    labels: Sequence[int],
    task: str = "",
    split: str = "test",
    seed: int = 0,
    class_names: Sequence[str] | None = None,
    model: str = "",
) -> EvalReport:
    """Metric bundle for a (N, C) probability matrix.

    Binary tasks score the positive class (index 1); multiclass tasks add
    one-vs-rest ranking metrics for each class that is both present and absent.
    """
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n, c = probs.shape
    names = list(class_names) if class_names else [str(i) for i in range(c)]
    pred = probs.argmax(axis=1)
    f1 = f1_per_class(pred, y, c)
    metrics: dict = {"macro_f1": float(f1.f1.mean()), "accuracy": float((pred == y).mean())}
    per_class: dict = {}
    for k in range(c):
        entry = {"f1": float(f1.f1[k]), "support": int((y == k).sum())}
        if k in f1.absent:
            entry["f1_undefined"] = True
        per_class[names[k]] = entry
    if c == 2:
        yb = (y == 1).astype(int)
        if 0 < yb.sum() < n:
            metrics["roc_auc"] = roc_auc(probs[:, 1], yb)
        if yb.sum() > 0:
            metrics["pr_auc"] = pr_auc(probs[:, 1], yb)
            metrics["pr95"] = precision_at_recall(probs[:, 1], yb, 0.95)
    else:
        for k in range(c):
            yk = (y == k).astype(int)
            if 0 < yk.sum() < n:
                per_class[names[k]]["roc_auc"] = roc_auc(probs[:, k], yk)
                per_class[names[k]]["pr_auc"] = pr_auc(probs[:, k], yk)
    return EvalReport(task, split, metrics, per_class, int(n), int(seed), model)


def early_stop_score(probs: np.ndarray, labels: Sequence[int]) -> float:
    """PR-AUC for binary tasks, macro-F1 otherwise."""
    probs = np.asarray(probs)
    y = np.asarray(labels)
    if probs.shape[1] == 2 and 0 < (y == 1).sum():
        return pr_auc(probs[:, 1], (y == 1).astype(int))
    return macro_f1(probs.argmax(axis=1), y, probs.shape[1])
