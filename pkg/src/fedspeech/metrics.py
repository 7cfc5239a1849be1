"""Classification metrics and paired significance testing.

AUC follows the Mann-Whitney convention (ties count half), realized as the
trapezoidal integral of the ROC curve so the two formulations agree to
floating-point accuracy. The two-tailed Student-t tail probability is
evaluated through the regularized incomplete beta function with a
continued-fraction expansion, accurate to well below 1e-10.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError


@dataclass
class ConfusionMetrics:
    accuracy: float
    sensitivity: float       # PD (label 1) recall; NaN if the fold has no positives
    specificity: float       # HC (label 0) recall; NaN if the fold has no negatives


def confusion_metrics(scores: Sequence[float], labels: Sequence[int],
                      threshold: float = 0.5) -> ConfusionMetrics:
    """Threshold the positive-class scores and read the 2x2 confusion table.

    A metric whose denominator is zero (single-class fold) comes back as NaN so
    callers can exclude it from aggregates.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise DataError("scores and labels must have equal lengths")
    if scores.size == 0:
        raise DataError("cannot compute metrics on an empty fold")
    pred = scores >= threshold
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    tn = int(np.sum(~pred & ~pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    accuracy = (tp + tn) / scores.size
    sensitivity = tp / (tp + fn) if tp + fn > 0 else math.nan
    specificity = tn / (tn + fp) if tn + fp > 0 else math.nan
    return ConfusionMetrics(accuracy, sensitivity, specificity)


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> np.ndarray:
    """(FPR, TPR) points at every distinct threshold, from (0,0) to (1,1).

    Thresholds sweep the distinct score values from high to low; samples tied
    at a threshold enter together, which yields the diagonal segments that give
    ties half credit under the trapezoid rule.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC needs at least one positive and one negative sample")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_pos = labels[order] == 1
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    n = scores.size
    while i < n:
        j = i
        while j < n and sorted_scores[j] == sorted_scores[i]:
            if sorted_pos[j]:
                tp += 1
            else:
                fp += 1
            j += 1
        points.append((fp / n_neg, tp / n_pos))
        i = j
    return np.asarray(points)


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> tuple[float, np.ndarray]:
    """AUC (probability a random positive outranks a random negative, ties
    half) and the ROC curve points it integrates."""
    points = roc_curve(scores, labels)
    fpr = points[:, 0]
    tpr = points[:, 1]
    auc = float(np.trapezoid(tpr, fpr))
    return auc, points


def histogram_scores(scores: Sequence[float], labels: Sequence[int],
                     bins: int = 10) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Equal-width score histogram on [0, 1] per class.

    Returns (bin_edges, hc_counts, pd_counts); the last bin is right-closed.
    """
    if bins < 2:
        raise DataError("need at least 2 bins")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.minimum((scores * bins).astype(np.int64), bins - 1)
    hc = np.bincount(idx[labels == 0], minlength=bins)
    pd = np.bincount(idx[labels == 1], minlength=bins)
    return edges, hc, pd


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    max_iter = 300
    tiny = 1e-300
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge "
                          f"for a={a}, b={b}, x={x}")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) via the continued fraction, using the symmetry that keeps the
    expansion in its rapidly converging region."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log(1.0 - x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: int) -> float:
    """Two-tailed tail probability 2 * P(T >= |t|) for Student's t."""
    if df < 1:
        raise DataError(f"degrees of freedom must be >= 1, got {df}")
    t = float(t)
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return regularized_incomplete_beta(df / 2.0, 0.5, x)


@dataclass
class TTestResult:
    t_statistic: float
    p_value: float
    degrees_of_freedom: int
    mean_difference: float
    degenerate: bool = False   # zero spread with a nonzero mean difference


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-tailed paired t-test on aligned samples.

    Zero spread with zero mean difference gives t = 0, p = 1; zero spread with
    a nonzero mean difference is flagged degenerate with p = 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"paired samples differ in length: {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise DataError("paired t-test needs at least 2 pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    df = n - 1
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, df, 0.0)
        return TTestResult(math.copysign(math.inf, mean), 0.0, df, mean, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, student_t_sf(t, df), df, mean)
