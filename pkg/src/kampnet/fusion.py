"""Convex late fusion of DSN and SVM survival probabilities."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .stats import auc

DEFAULT_ALPHA = 0.75


def _check_unit(name, x):
    a = np.asarray(x, dtype=np.float64)
    if np.any(~np.isfinite(a)) or np.any(a < 0) or np.any(a > 1):
        raise ValueError(f"{name} must lie in [0, 1]")
    return a


def fuse(p_dsn, p_svm, alpha=DEFAULT_ALPHA):
    """p^s = alpha * p^s_DSN + (1 - alpha) * p^s_SVM (elementwise)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    a = _check_unit("p_dsn", p_dsn)
    b = _check_unit("p_svm", p_svm)
    out = alpha * a + (1.0 - alpha) * b
    return float(out) if out.ndim == 0 else out


def alpha_grid(step=0.05):
    """0, step, ..., 1 -- exact endpoints, ``round(1/step) + 1`` points."""
    if not 0 < step <= 1:
        raise ValueError("step must lie in (0, 1]")
    n = int(round(1.0 / step))
    if abs(n * step - 1.0) > 1e-9:
        grid = [i * step for i in range(int(np.floor(1.0 / step + 1e-9)) + 1)]
        if grid[-1] < 1.0:
            grid.append(1.0)
        return grid
    return [i / n for i in range(n + 1)]


@dataclass
class FoldScores:
    """Component probabilities and labels of one fold's subjects."""

    p_dsn: np.ndarray
    p_svm: np.ndarray
    labels: np.ndarray


@dataclass
class SweepRow:
    alpha: float
    mean_auc: float
    std_auc: float
    fold_aucs: list


def sweep_alpha(folds, step=0.05):
    """Per-alpha AUC across folds (mean and sample std)."""
    rows = []
    for a in alpha_grid(step):
        aucs = [auc(fuse(f.p_dsn, f.p_svm, a), f.labels) for f in folds]
        std = float(np.std(aucs, ddof=1)) if len(aucs) > 1 else 0.0
        rows.append(SweepRow(alpha=a, mean_auc=float(np.mean(aucs)), std_auc=std, fold_aucs=aucs))
    return rows


def select_alpha(p_dsn, p_svm, labels, step=0.05, prefer=DEFAULT_ALPHA):
    """Alpha maximizing AUC on held-out (validation) subjects.

    Ties go to the alpha closest to ``prefer``, then to the smaller alpha.
    """
    best = None
    for a in alpha_grid(step):
        score = auc(fuse(p_dsn, p_svm, a), labels)
        key = (-score, abs(a - prefer), a)
        if best is None or key < best[0]:
            best = (key, a)
    return best[1]


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["alpha", "mean_auc", "std_auc"])
    for r in rows:
        w.writerow([f"{r.alpha:.4f}", repr(r.mean_auc), repr(r.std_auc)])
    return buf.getvalue()
