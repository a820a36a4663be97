"""Brute-force rational-arithmetic oracles for the metric suite.

Each one enumerates pairs or thresholds directly from the definitions, with no
sorting tricks or cumulative sums shared with the library code.
"""

from fractions import Fraction


def roc_oracle(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    credit = Fraction(0)
    for p in pos:
        for n in neg:
            if p > n:
                credit += 1
            elif p == n:
                credit += Fraction(1, 2)
    return credit / (len(pos) * len(neg))


def _curve(scores, labels):
    """(precision, recall) at every distinct threshold, highest threshold first."""
    n_pos = sum(labels)
    points = []
    for t in sorted(set(scores), reverse=True):
        chosen = [y for s, y in zip(scores, labels) if s >= t]
        tp = sum(chosen)
        points.append((Fraction(tp, len(chosen)), Fraction(tp, n_pos)))
    return points


def ap_oracle(scores, labels):
    total = Fraction(0)
    prev_recall = Fraction(0)
    for precision, recall in _curve(scores, labels):
        total += (recall - prev_recall) * precision
        prev_recall = recall
    return total


def pr_at_recall_oracle(scores, labels, target):
    ok = [p for p, r in _curve(scores, labels) if r >= Fraction(target)]
    return max(ok)


def f1_oracle(pred, truth, n_classes):
    out = []
    for c in range(n_classes):
        tp = sum(1 for p, t in zip(pred, truth) if p == c and t == c)
        fp = sum(1 for p, t in zip(pred, truth) if p == c and t != c)
        fn = sum(1 for p, t in zip(pred, truth) if p != c and t == c)
        if tp == 0 and fp == 0 and fn == 0:
            out.append(Fraction(0))
            continue
        precision = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
        recall = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
        out.append(2 * precision * recall / (precision + recall) if precision + recall else Fraction(0))
    return out
