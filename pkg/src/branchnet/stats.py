"""Classification metrics and the exact Wilcoxon signed-rank test."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np


def accuracy(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.size == 0:
        raise ValueError("empty label set")
    return float(np.mean(y_true == y_pred))


def per_class_f1(y_true, y_pred, n_classes: int) -> np.ndarray:
    """F1 for each class; a class with no true and no predicted samples scores 0."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    f1 = np.zeros(n_classes)
    for c in range(n_classes):
        tp = np.sum((y_true == c) & (y_pred == c))
        fp = np.sum((y_true != c) & (y_pred == c))
        fn = np.sum((y_true == c) & (y_pred != c))
        denom = 2 * tp + fp + fn
        f1[c] = 2 * tp / denom if denom else 0.0
    return f1


def f1_macro(y_true, y_pred, n_classes: int) -> float:
    if np.asarray(y_true).size == 0:
        raise ValueError("empty label set")
    return float(per_class_f1(y_true, y_pred, n_classes).mean())


@dataclass(frozen=True)
class WilcoxonResult:
    w_plus: float
    w_minus: float
    statistic: float
    n_used: int
    p_exact: Fraction
    degenerate: bool = False

    @property
    def p_value(self) -> float:
        return float(self.p_exact)


def _doubled_midranks(abs_vals: np.ndarray) -> np.ndarray:
    """2 x midrank of each value (ties share the average rank), as integers."""
    order = np.argsort(abs_vals, kind="stable")
    sorted_vals = abs_vals[order]
    ranks2 = np.empty(abs_vals.size, dtype=np.int64)
    i = 0
    n = abs_vals.size
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        # positions i..j hold 1-based ranks i+1..j+1
        ranks2[order[i:j + 1]] = (i + 1) + (j + 1)
        i = j + 1
    return ranks2


def signed_rank_distribution(ranks2) -> list[int]:
    """counts[s] = number of sign assignments whose positive rank sum equals s."""
    total = int(sum(ranks2))
    counts = [0] * (total + 1)
    counts[0] = 1
    reach = 0
    for r in ranks2:
        r = int(r)
        for s in range(reach, -1, -1):
            if counts[s]:
                counts[s + r] += counts[s]
        reach += r
    return counts


def wilcoxon_exact(diffs, decimals: int | None = 12) -> WilcoxonResult:
    """Two-sided exact Wilcoxon signed-rank test on paired differences.

    Zero differences are discarded and tied magnitudes get midranks. The
    p-value is 2 P(W <= min(W+, W-)) under the exact null distribution,
    capped at 1, as a Fraction. Differences are rounded to ``decimals``
    before ranking so float noise from subtracting scores does not break
    genuine ties.
    """
    d = np.asarray(diffs, dtype=np.float64).ravel()
    if d.size == 0:
        raise ValueError("no differences given")
    if not np.all(np.isfinite(d)):
        raise ValueError("non-finite difference")
    if decimals is not None:
        d = np.round(d, decimals)
    d = d[d != 0]
    if d.size == 0:
        return WilcoxonResult(0.0, 0.0, 0.0, 0, Fraction(1), degenerate=True)
    ranks2 = _doubled_midranks(np.abs(d))
    wp2 = int(ranks2[d > 0].sum())
    wm2 = int(ranks2[d < 0].sum())
    t2 = min(wp2, wm2)
    counts = signed_rank_distribution(ranks2)
    tail = sum(counts[: t2 + 1])
    p = min(Fraction(1), Fraction(2 * tail, 2 ** d.size))
    return WilcoxonResult(wp2 / 2, wm2 / 2, t2 / 2, int(d.size), p)
