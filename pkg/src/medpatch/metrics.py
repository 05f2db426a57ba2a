"""Ranking metrics, bootstrap intervals and paired t-tests."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammaln
from scipy.stats import rankdata

log = logging.getLogger(__name__)


class DegenerateLabels(ValueError):
    """Labels lack a positive or a negative, so the metric is undefined."""


def _binary_inputs(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.size} vs {y.size}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with half credit for ties, via midranks."""
    s, y = _binary_inputs(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("AUROC needs at least one positive and one negative label")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision: mean of precision@k over the ranks k of the positives.

    Scores are sorted descending; equal scores keep their original order.
    """
    s, y = _binary_inputs(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise DegenerateLabels("AUPRC needs at least one positive label")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, s.size + 1)
    return float(np.sum(precision * hits) / n_pos)


METRICS = {"auroc": auroc, "auprc": auprc}


def macro_average(values: Sequence) -> float:
    """Unweighted mean over classes; ``None``/NaN entries are skipped."""
    kept = []
    skipped = []
    for c, v in enumerate(values):
        if v is None or (isinstance(v, float) and math.isnan(v)):
            skipped.append(c)
        else:
            kept.append(float(v))
    if skipped:
        log.info("macro average skipped classes %s", skipped)
    if not kept:
        raise DegenerateLabels("no class has a computable metric")
    return float(np.mean(kept))


def per_class(metric: Callable, scores, labels) -> list:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.ndim == 1:
        s, y = s[:, None], y[:, None]
    out = []
    for c in range(s.shape[1]):
        try:
            out.append(metric(s[:, c], y[:, c]))
        except DegenerateLabels:
            log.warning("class %d skipped: single-class labels", c)
            out.append(None)
    return out


def macro_metric(metric: Callable, scores, labels) -> float:
    return macro_average(per_class(metric, scores, labels))


def macro_auroc(scores, labels) -> float:
    return macro_metric(auroc, scores, labels)


def macro_auprc(scores, labels) -> float:
    return macro_metric(auprc, scores, labels)


def safe_macro_auroc(scores, labels) -> float:
    """Macro AUROC, or NaN when no class is computable."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.ndim == 1:
        s, y = s[:, None], y[:, None]
    vals = []
    for c in range(s.shape[1]):
        try:
            vals.append(auroc(s[:, c], y[:, c]))
        except DegenerateLabels:
            pass
    return float(np.mean(vals)) if vals else float("nan")


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    metric: str
    point: float
    lo: float
    hi: float
    n_replicates: int
    seed: int

    def to_dict(self):
        return asdict(self)


def _degenerate(labels_2d) -> bool:
    for c in range(labels_2d.shape[1]):
        col = labels_2d[:, c]
        if col.min() != col.max():
            return False
    return True


def bootstrap_indices(labels, replicates=1000, seed=0, max_attempts=10):
    """Resample index arrays, one per replicate.

    Replicate ``r``, attempt ``k`` draws from ``default_rng([seed, r, k])`` so
    the stream is addressable by counter and independent of evaluation order.
    A draw whose labels are single-class in every column is redrawn; after
    ``max_attempts`` the replicate is dropped and ``None`` is stored.
    """
    y = np.asarray(labels, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    n = y.shape[0]
    if n == 0:
        raise ValueError("bootstrap needs a non-empty dataset")
    out = []
    for r in range(replicates):
        idx = None
        for k in range(max_attempts):
            cand = np.random.default_rng([seed, r, k]).integers(0, n, size=n)
            if not _degenerate(y[cand]):
                idx = cand
                break
        out.append(idx)
    return out


def bootstrap_ci(metric: Callable, scores, labels, replicates=1000, seed=0, name=None,
                 indices=None):
    """Percentile 95% interval for ``metric(scores, labels)``.

    Returns ``(MetricReport, replicate_values)``.  Passing the same
    ``indices`` (see :func:`bootstrap_indices`) to several calls pairs their
    replicates.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape[0] == 0:
        raise ValueError("bootstrap needs a non-empty dataset")
    if indices is None:
        indices = bootstrap_indices(y, replicates, seed)
    values = []
    skipped = 0
    for idx in indices:
        if idx is None:
            skipped += 1
            continue
        try:
            values.append(metric(s[idx], y[idx]))
        except DegenerateLabels:
            skipped += 1
    if skipped:
        log.info("bootstrap skipped %d degenerate replicates", skipped)
    if not values:
        raise DegenerateLabels("every bootstrap replicate was degenerate")
    values = np.asarray(values)
    point = float(metric(s, y))
    lo, hi = np.percentile(values, [2.5, 97.5])
    report = MetricReport(name or getattr(metric, "__name__", "metric"), point, float(lo), float(hi),
                          int(values.size), int(seed))
    if not lo <= point <= hi:
        log.info("point estimate %.6f outside bootstrap interval (%.6f, %.6f)", point, lo, hi)
    return report, values


# ---------------------------------------------------------------------------
# Paired t-test
# ---------------------------------------------------------------------------


def _betacf(a, b, x, max_iter=10000, tol=1e-16):
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            break
    return h


def log_betainc(a: float, b: float, x: float) -> float:
    """Natural log of the regularized incomplete beta function I_x(a, b)."""
    if not (a > 0 and b > 0):
        raise ValueError("a and b must be positive")
    if x <= 0.0:
        return -math.inf
    if x >= 1.0:
        return 0.0
    log_front = (gammaln(a + b) - gammaln(a) - gammaln(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return log_front + math.log(_betacf(a, b, x)) - math.log(a)
    tail = math.exp(log_front + math.log(_betacf(b, a, 1.0 - x)) - math.log(b))
    return math.log1p(-tail) if tail < 1.0 else -math.inf


def t_two_sided_log_p(t: float, dof: float) -> float:
    """log of P(|T| >= |t|) for Student's t with ``dof`` degrees of freedom."""
    if math.isinf(t):
        return -math.inf
    x = dof / (dof + t * t)
    return log_betainc(dof / 2.0, 0.5, x)


@dataclass
class TTestResult:
    t: float
    p: float
    log10_p: float
    n: int

    def __iter__(self):
        return iter((self.t, self.p))


def paired_t_test(a, b) -> TTestResult:
    """Two-sided paired t-test of replicate vectors ``a`` and ``b``.

    All-zero differences give ``t = 0, p = 1``.  The p-value is also reported
    as ``log10_p`` because it underflows for large |t|.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"replicate vectors must be 1-D and equal length: {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least two replicates")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, 0.0, n)
        t = math.copysign(math.inf, mean)
    else:
        t = mean / (sd / math.sqrt(n))
    log_p = t_two_sided_log_p(t, n - 1)
    return TTestResult(t, math.exp(log_p), log_p / math.log(10.0), n)


def bonferroni(p: float, n_comparisons: int) -> float:
    return min(1.0, p * n_comparisons)
