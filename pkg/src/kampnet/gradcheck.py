"""Central finite-difference checks for every differentiable op."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation scaled by the largest numeric gradient entry."""
    scale = max(float(np.max(np.abs(numeric))), float(np.max(np.abs(analytic))), 1e-12)
    return float(np.max(np.abs(analytic - numeric))) / scale


def check_gradients(fn, inputs, h=1e-5, seed=0):
    """Compare autodiff and central differences for ``fn(*inputs)``.

    Non-scalar outputs are reduced with a fixed random projection so every
    output entry contributes. Returns the worst relative error over inputs.
    """
    inputs = [ad.Tensor(np.array(x, dtype=np.float64), requires_grad=True, dtype=np.float64) for x in inputs]
    out = fn(*inputs)
    proj = np.random.default_rng(seed).standard_normal(out.shape)

    def scalar():
        return float(np.sum(fn(*inputs).data * proj))

    ad.backprop(out, proj)
    worst = 0.0
    for x in inputs:
        numeric = np.zeros_like(x.data)
        flat, nflat = x.data.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = scalar()
            flat[i] = orig - h
            fm = scalar()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * h)
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _bn_train(x, g, b):
    c = x.shape[1]
    return ad.batchnorm2d(x, g, b, np.zeros(c), np.ones(c), training=True)


def _bn_eval(x, g, b):
    c = x.shape[1]
    return ad.batchnorm2d(x, g, b, np.linspace(-0.5, 0.5, c), np.linspace(0.5, 2.0, c), training=False)


def _ce(z):
    return ad.cross_entropy(ad.softmax(z), np.array([1, 0, 1, 1]))


def _ce_probs(p):
    # probabilities kept away from the floor; rows need not renormalize for the check
    return ad.cross_entropy(p, np.array([0, 1, 1]))


def op_cases(rng):
    """(name, fn, input arrays) for one random draw of every op kind."""
    r = rng.standard_normal
    return [
        ("conv2d", lambda x, w, b: ad.conv2d(x, w, b, stride=1, padding=1), [r((2, 3, 5, 5)), r((4, 3, 3, 3)), r(4)]),
        ("conv2d_strided", lambda x, w: ad.conv2d(x, w, stride=2, padding=0), [r((2, 2, 6, 6)), r((3, 2, 1, 1))]),
        ("linear", ad.linear, [r((3, 5)), r((2, 5)), r(2)]),
        ("relu", ad.relu, [r((2, 3, 4, 4))]),
        ("maxpool2d", lambda x: ad.maxpool2d(x, 2), [r((2, 3, 4, 4))]),
        ("maxpool2d_overlap", lambda x: ad.maxpool2d(x, 3, stride=2, padding=1), [r((1, 2, 5, 5))]),
        ("global_avgpool2d", ad.global_avgpool2d, [r((2, 3, 3, 4))]),
        ("batchnorm2d", _bn_train, [r((3, 2, 3, 3)), 1 + 0.1 * r(2), r(2)]),
        ("batchnorm2d_eval", _bn_eval, [r((3, 2, 3, 3)), 1 + 0.1 * r(2), r(2)]),
        ("add", ad.add, [r((2, 3)), r((2, 3))]),
        ("concat", lambda a, b: ad.concat([a, b], axis=1), [r((2, 3)), r((2, 2))]),
        ("softmax", ad.softmax, [r((3, 2))]),
        ("cross_entropy", _ce, [r((4, 2))]),
        ("cross_entropy_probs", _ce_probs, [rng.uniform(0.2, 0.8, (3, 2))]),
    ]


def run_all(points=3, seed=0, h=1e-5):
    """Worst relative error per op kind over ``points`` random draws."""
    rng = np.random.default_rng(seed)
    worst = {}
    for k in range(points):
        for name, fn, arrays in op_cases(rng):
            err = check_gradients(fn, arrays, h=h, seed=seed + k)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
