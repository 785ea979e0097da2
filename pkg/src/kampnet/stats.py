"""ROC / AUC and the hypothesis tests used to compare methods across folds."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

AD_CRITICAL_5PCT = 0.752


class SingleClassError(ValueError):
    """Scores/labels contain only one class, so ROC and AUC are undefined."""


class ConstantDifferencesError(ValueError):
    """Paired differences are constant and non-zero; the t statistic is undefined."""


def _split(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and of equal length")
    pos, neg = s[y == 1], s[y == 0]
    if pos.size + neg.size != s.size:
        raise ValueError("labels must be 0 or 1")
    if pos.size == 0 or neg.size == 0:
        raise SingleClassError("AUC needs both positive and negative samples")
    return s, y, pos, neg


def _average_ranks(values):
    order = np.argsort(values, kind="mergesort")
    sv = values[order]
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    n = values.size
    while i < n:
        j = i
        while j + 1 < n and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie)."""
    s, y, pos, neg = _split(scores, labels)
    ranks = _average_ranks(s)
    n_pos, n_neg = pos.size, neg.size
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray   # +inf for the (0, 0) point

    def area(self) -> float:
        return trapezoid_area(self.fpr, self.tpr)


def roc_curve(scores, labels) -> RocCurve:
    """One point per distinct score (descending); tied scores form a single step."""
    s, y, pos, neg = _split(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last_of_group = np.r_[np.nonzero(np.diff(s_sorted))[0], s_sorted.size - 1]
    tp = np.cumsum(y_sorted == 1)[last_of_group]
    fp = np.cumsum(y_sorted == 0)[last_of_group]
    fpr = np.r_[0.0, fp / neg.size]
    tpr = np.r_[0.0, tp / pos.size]
    thr = np.r_[np.inf, s_sorted[last_of_group]]
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thr)


def trapezoid_area(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


# -------------------------------------------------------------- normality

def _norm_logcdf(z):
    # log Phi(z) via erfc keeps precision in the lower tail
    return math.log(max(0.5 * math.erfc(-z / math.sqrt(2.0)), 1e-300))


@dataclass
class AndersonDarling:
    statistic: float        # A^2 against the fitted normal
    adjusted: float         # A^2 (1 + 0.75/n + 2.25/n^2)
    critical_5pct: float
    reject_at_5pct: bool


def anderson_darling_normal(sample) -> AndersonDarling:
    """Anderson-Darling test of normality with mean and variance estimated."""
    x = np.sort(np.asarray(sample, dtype=np.float64))
    n = x.size
    if n < 5:
        raise ValueError("Anderson-Darling needs at least 5 observations")
    sd = x.std(ddof=1)
    if not sd > 0:
        raise ValueError("Anderson-Darling is undefined for a constant sample")
    z = (x - x.mean()) / sd
    total = 0.0
    for i in range(n):
        total += (2 * i + 1) * (_norm_logcdf(z[i]) + _norm_logcdf(-z[n - 1 - i]))
    a2 = -n - total / n
    adj = a2 * (1.0 + 0.75 / n + 2.25 / n ** 2)
    return AndersonDarling(statistic=a2, adjusted=adj, critical_5pct=AD_CRITICAL_5PCT,
                           reject_at_5pct=adj > AD_CRITICAL_5PCT)


# ------------------------------------------------------------------ t-test

def _betacf(a, b, x, max_iter=500, tol=1e-15):
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
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a, b, x) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    ln_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t, df) -> float:
    """P(T > t) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if t == 0:
        return 0.5
    t2 = t * t
    if t2 < df:
        # near zero, work with P(|T| < t) to avoid cancellation in 1 - x
        tail = 0.5 - 0.5 * betainc(0.5, df / 2.0, t2 / (df + t2))
    else:
        tail = 0.5 * betainc(df / 2.0, 0.5, df / (df + t2))
    return tail if t > 0 else 1.0 - tail


@dataclass
class PairedTTest:
    t: float
    p: float
    df: int
    mean_diff: float
    reject_at_5pct: bool


def paired_t_test_one_sided(a, b, alpha=0.05) -> PairedTTest:
    """One-sided paired t-test of H1: mean(a - b) > 0.

    All-zero differences give t = 0, p = 0.5 by convention; constant non-zero
    differences raise :class:`ConstantDifferencesError`.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    k = a.size
    if k < 2:
        raise ValueError("paired t-test needs at least two pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return PairedTTest(t=0.0, p=0.5, df=k - 1, mean_diff=0.0, reject_at_5pct=False)
        raise ConstantDifferencesError(f"all {k} paired differences equal {mean!r}; t is undefined")
    t = mean / (sd / math.sqrt(k))
    p = student_t_sf(t, k - 1)
    return PairedTTest(t=t, p=p, df=k - 1, mean_diff=mean, reject_at_5pct=p < alpha)
