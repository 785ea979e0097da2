"""Linear SVM over the clinical measurements, with Platt-calibrated output."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass

import numba
import numpy as np


@dataclass
class SvmModel:
    weights: list          # one per input feature (0 for dropped constant features)
    bias: float
    C: float
    scaler_mean: list
    scaler_std: list       # 1.0 placeholder for dropped features
    active: list           # bool per feature
    A: float
    B: float
    seed: int = 0
    iterations: int = 100_000

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SvmModel":
        return cls(**json.loads(text))


def _targets(labels):
    y = np.asarray(labels)
    if y.ndim != 1 or not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be a 1-D array of 0/1")
    return 2.0 * y - 1.0


def objective(w, b, X, t, C) -> float:
    """0.5 |w|^2 + C * sum(hinge(1 - t (X w + b)))."""
    margins = t * (X @ w + b)
    return 0.5 * float(w @ w) + C * float(np.maximum(0.0, 1.0 - margins).sum())


@numba.njit(cache=True)
def _subgradient_loop(tX, t, lam, radius, b_bound, iterations):
    n, d = tX.shape
    w = np.zeros(d)
    b = 0.0
    w_sum = np.zeros(d)
    b_sum = 0.0
    start = iterations // 2
    gw = np.zeros(d)
    for it in range(1, iterations + 1):
        gw[:] = 0.0
        gb = 0.0
        for i in range(n):
            m = t[i] * b
            for k in range(d):
                m += tX[i, k] * w[k]
            if m < 1.0:
                for k in range(d):
                    gw[k] += tX[i, k]
                gb += t[i]
        eta = 1.0 / (lam * it)
        shrink = 1.0 - 1.0 / it
        norm2 = 0.0
        for k in range(d):
            w[k] = shrink * w[k] + eta * gw[k] / n
            norm2 += w[k] * w[k]
        b += eta * gb / n
        norm = math.sqrt(norm2)
        if norm > radius:
            for k in range(d):
                w[k] *= radius / norm
        b = min(max(b, -b_bound), b_bound)
        if it > start:
            for k in range(d):
                w_sum[k] += w[k]
            b_sum += b
    cnt = iterations - start
    return w_sum / cnt, b_sum / cnt


def fit_hinge(X, t, C, iterations=100_000):
    """Deterministic full-batch subgradient descent on the primal objective.

    Uses step 1/(lambda t) with lambda = 1/(C N) (the objective divided by
    C N), projects w onto the ball that must contain the optimum, and returns
    the average of the second half of the iterates.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    t = np.ascontiguousarray(t, dtype=np.float64)
    n = X.shape[0]
    lam = 1.0 / (C * n)
    radius = 1.0 / math.sqrt(lam)
    b_bound = 1.0 + radius * float(np.max(np.linalg.norm(X, axis=1)))
    return _subgradient_loop(t[:, None] * X, t, lam, radius, b_bound, int(iterations))


def fit_platt(decision, labels, max_iter=100, min_step=1e-10, sigma=1e-12, eps=1e-5):
    """Sigmoid p = 1 / (1 + exp(A s + B)) for P(label = 1 | s).

    Newton's method with backtracking on the cross-entropy against smoothed
    targets (N+ + 1)/(N+ + 2) and 1/(N- + 2).
    """
    s = np.asarray(decision, dtype=np.float64)
    y = np.asarray(labels)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    hi, lo = (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0)
    tgt = np.where(y == 1, hi, lo)

    def value(A, B):
        f = s * A + B
        return float(np.sum(tgt * f + np.logaddexp(0.0, -f)))

    A, B = 0.0, math.log((n_neg + 1.0) / (n_pos + 1.0))
    fval = value(A, B)
    for _ in range(max_iter):
        f = s * A + B
        p = sigmoid_proba(s, A, B)
        q = 1 - p
        d2 = p * q
        h11 = sigma + float(np.sum(s * s * d2))
        h22 = sigma + float(np.sum(d2))
        h21 = float(np.sum(s * d2))
        d1 = tgt - p
        g1 = float(np.sum(s * d1))
        g2 = float(np.sum(d1))
        if abs(g1) < eps and abs(g2) < eps:
            break
        det = h11 * h22 - h21 * h21
        dA = -(h22 * g1 - h21 * g2) / det
        dB = -(-h21 * g1 + h11 * g2) / det
        gd = g1 * dA + g2 * dB
        step = 1.0
        while step >= min_step:
            nA, nB = A + step * dA, B + step * dB
            nval = value(nA, nB)
            if nval < fval + 1e-4 * step * gd:
                A, B, fval = nA, nB, nval
                break
            step /= 2.0
        else:
            break
    return A, B


def train_svm(features, labels, C=1.0, iterations=100_000, seed=0) -> SvmModel:
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("features must be (N, d) with one label per row")
    if X.shape[0] < 2 or len(np.unique(y)) < 2:
        raise ValueError("training an SVM needs at least two samples from both classes")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    if C <= 0:
        raise ValueError("C must be positive")
    t = _targets(y)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    active = std > 0
    for k in np.nonzero(~active)[0]:
        warnings.warn(f"clinical feature {k} is constant in the training data; dropped", RuntimeWarning)
    if not active.any():
        raise ValueError("all features are constant")
    safe_std = np.where(active, std, 1.0)
    Z = ((X - mean) / safe_std)[:, active]
    w_act, b = fit_hinge(Z, t, C, iterations)
    w = np.zeros(X.shape[1])
    w[active] = w_act
    dec = Z @ w_act + b
    A, B = fit_platt(dec, y)
    return SvmModel(weights=w.tolist(), bias=float(b), C=float(C), scaler_mean=mean.tolist(),
                    scaler_std=safe_std.tolist(), active=active.tolist(), A=float(A), B=float(B),
                    seed=int(seed), iterations=int(iterations))


def decision_function(model: SvmModel, features) -> np.ndarray:
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if np.isnan(X).any():
        raise ValueError("NaN clinical feature")
    Z = (X - np.asarray(model.scaler_mean)) / np.asarray(model.scaler_std)
    Z[:, ~np.asarray(model.active, dtype=bool)] = 0.0
    return Z @ np.asarray(model.weights) + model.bias


def sigmoid_proba(decision, A, B) -> np.ndarray:
    """1 / (1 + exp(A s + B)) without overflow."""
    f = np.asarray(decision, dtype=np.float64) * A + B
    e = np.exp(-np.abs(f))
    return np.where(f >= 0, e / (1.0 + e), 1.0 / (1.0 + e))


def predict_proba(model: SvmModel, features) -> np.ndarray:
    """Survival probability p^s_SVM for each row; p^d_SVM is ``1 - p``."""
    return sigmoid_proba(decision_function(model, features), model.A, model.B)
