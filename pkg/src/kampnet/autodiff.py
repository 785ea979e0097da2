"""Dense NCHW tensors with reverse-mode differentiation.

Each op computes its output eagerly and records a closure that pushes the
output gradient back onto its inputs. ``Tensor.backward`` walks the recorded
graph in reverse topological order. The op set is the small closure needed
for residual CNNs: conv2d, linear, relu, maxpool2d, global_avgpool2d,
batchnorm2d, add, concat, softmax and cross_entropy (plus ``sum`` for tests).
"""
from __future__ import annotations

import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12

_DEBUG = False


def set_debug(enabled: bool) -> None:
    """Enable finite-value and probability-row checks after every op."""
    global _DEBUG
    _DEBUG = bool(enabled)


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the op parameters."""

    def __init__(self, op: str, message: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: {message} (shapes: {', '.join(str(s) for s in shapes)})")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, _parents=(), op: str = ""):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ShapeError("tensor", "rank must be <= 4", arr.shape)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = _parents
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self.op or 'leaf'})"

    def zero_grad(self):
        self.grad = None

    def sum(self) -> "Tensor":
        out = _result(np.asarray(self.data.sum(), dtype=self.data.dtype), (self,), "sum")
        out._backward = lambda g: [(self, np.broadcast_to(g, self.data.shape))]
        return out

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Backpropagate from this scalar through every recorded op."""
        if self.data.size != 1 or self.data.ndim > 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.data.shape}")
        backprop(self, np.ones_like(self.data))


def backprop(root: Tensor, seed: np.ndarray) -> None:
    """Push ``seed`` (d loss / d root) back to every leaf that requires grad."""
    if not root.requires_grad:
        raise RuntimeError("backward called on a tensor that does not require grad "
                           "(no differentiable forward pass recorded)")
    order = _topological_order(root)
    grads = {id(root): np.asarray(seed, dtype=root.data.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node._accumulate(g)
            continue
        # intermediates never hold .grad; only leaves accumulate
        for parent, pg in node._backward(g):
            if pg is None or not parent.requires_grad:
                continue
            if _DEBUG and not np.all(np.isfinite(pg)):
                raise FloatingPointError(f"non-finite gradient flowing out of {node.op}")
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
        node._backward = _consumed
        node._parents = ()


def _consumed(g):
    raise RuntimeError("graph already consumed by a previous backward pass; run forward again")


def _topological_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _result(data, parents, op) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, dtype=data.dtype, _parents=parents if requires else (), op=op)
    return out


# ---------------------------------------------------------------- convolution

def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _im2col(x, kh, kw, stride, pad):
    """Columns laid out (N, C*kh*kw, Ho*Wo) so ``weight @ cols`` is already NCHW."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    if kh == 1 and kw == 1:
        cols = x[:, :, ::stride, ::stride][:, :, :ho, :wo].reshape(n, c, ho * wo)
        return np.ascontiguousarray(cols), ho, wo
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return cols, ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``x`` is (N, C, H, W), ``weight`` is (F, C, kh, kw)."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d", "expected 4-D input and weight", x.shape, weight.shape)
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError("conv2d", f"input has {c} channels but weight expects {cw}", x.shape, weight.shape)
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError("conv2d", "kernel larger than padded input", x.shape, weight.shape)
    if bias is not None and bias.shape != (f,):
        raise ShapeError("conv2d", "bias must have one entry per filter", bias.shape, weight.shape)

    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(f, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    parents = (x, weight) if bias is None else (x, weight, bias)
    out_t = _result(out.reshape(n, f, ho, wo), parents, "conv2d")

    def _backward(g):
        g3 = g.reshape(n, f, ho * wo)
        res = []
        if x.requires_grad and stride == 1 and padding <= min(kh, kw) - 1:
            # stride-1 input gradient is a full correlation with the flipped kernel
            ph, pw = kh - 1 - padding, kw - 1 - padding
            gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else g
            gcols, _, _ = _im2col(gp, kh, kw, 1, 0)
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            res.append((x, np.matmul(wflip, gcols).reshape(n, c, h, w)))
        elif x.requires_grad:
            dcols = np.matmul(wmat.T, g3).reshape(n, c, kh, kw, ho, wo)
            dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
            res.append((x, dx))
        if weight.requires_grad:
            dw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0)
            res.append((weight, dw.reshape(weight.shape)))
        if bias is not None and bias.requires_grad:
            res.append((bias, g3.sum(axis=(0, 2))))
        return res

    out_t._backward = _backward
    return out_t


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError("linear", "input width must match weight columns", x.shape, weight.shape)
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError("linear", "bias must have one entry per output", bias.shape, weight.shape)
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)
    out_t = _result(out, parents, "linear")

    def _backward(g):
        res = [(x, g @ weight.data), (weight, g.T @ x.data)]
        if bias is not None:
            res.append((bias, g.sum(axis=0)))
        return res

    out_t._backward = _backward
    return out_t


# ----------------------------------------------------------------- pointwise

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = _result(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), "relu")
    out._backward = lambda g: [(x, g * mask)]
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("add", "operands must have identical shapes", a.shape, b.shape)
    out = _result(a.data + b.data, (a, b), "add")
    out._backward = lambda g: [(a, g), (b, g)]
    return out


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat", "nothing to concatenate")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(a != b for k, (a, b) in enumerate(zip(t.shape, ref)) if k != axis):
            raise ShapeError("concat", f"shapes disagree off axis {axis}", *(t.shape for t in tensors))
    out = _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _backward(g):
        res = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            res.append((t, g[tuple(sl)]))
        return res

    out._backward = _backward
    return out


# ------------------------------------------------------------------- pooling

def maxpool2d(x: Tensor, kernel: int = 2, stride: int | None = None, padding: int = 0) -> Tensor:
    stride = kernel if stride is None else stride
    if x.data.ndim != 4:
        raise ShapeError("maxpool2d", "expected 4-D input", x.shape)
    n, c, h, w = x.shape
    ho, wo = _conv_out(h, kernel, stride, padding), _conv_out(w, kernel, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError("maxpool2d", f"kernel {kernel} too large", x.shape)
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    best = None
    arg = np.zeros((n, c, ho, wo), dtype=np.int32)
    for i in range(kernel):
        for j in range(kernel):
            view = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            if best is None:
                best = view.copy()
            else:
                better = view > best
                best[better] = view[better]
                arg[better] = i * kernel + j
    out = _result(best, (x,), "maxpool2d")

    def _backward(g):
        dxp = np.zeros(xp.shape, dtype=x.data.dtype)
        for i in range(kernel):
            for j in range(kernel):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * (arg == i * kernel + j)
        if padding:
            dxp = dxp[:, :, padding:padding + h, padding:padding + w]
        return [(x, dxp)]

    out._backward = _backward
    return out


def global_avgpool2d(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError("global_avgpool2d", "expected 4-D input", x.shape)
    n, c, h, w = x.shape
    out = _result(x.data.mean(axis=(2, 3)), (x,), "global_avgpool2d")
    scale = x.data.dtype.type(1.0 / (h * w))
    out._backward = lambda g: [(x, np.broadcast_to((g * scale)[:, :, None, None], x.shape))]
    return out


# --------------------------------------------------------------- batch norm

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance, PyTorch convention); in eval mode the
    running buffers are used.
    """
    if x.data.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError("batchnorm2d", "scale/shift must match channel count", x.shape, gamma.shape, beta.shape)
    dt = x.data.dtype
    if training:
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mean, var = running_mean.astype(dt), running_var.astype(dt)
        centered = x.data - mean[None, :, None, None]
    inv_std = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = centered * inv_std[None, :, None, None]
    out = _result(xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None],
                  (x, gamma, beta), "batchnorm2d")

    def _backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        gx = g * gamma.data[None, :, None, None]
        if training:
            dx = inv_std[None, :, None, None] * (
                gx - gx.mean(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (gx * xhat).mean(axis=(0, 2, 3))[None, :, None, None])
        else:
            dx = gx * inv_std[None, :, None, None]
        return [(x, dx), (gamma, dgamma), (beta, dbeta)]

    out._backward = _backward
    return out


# ---------------------------------------------------------- softmax and loss

def softmax(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError("softmax", "expected (N, K) logits", x.shape)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = _result(p, (x,), "softmax")
    out._backward = lambda g: [(x, p * (g - (g * p).sum(axis=1, keepdims=True)))]
    return out


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy on the class-1 column of (N, 2) probabilities.

    ``-(1/N) sum(y log p + (1 - y) log(1 - p))``; both logs are floored at
    ``PROB_FLOOR`` so the loss stays finite.
    """
    y = np.asarray(labels)
    if probs.data.ndim != 2 or probs.shape[1] != 2 or y.shape != (probs.shape[0],):
        raise ShapeError("cross_entropy", "expected (N, 2) probabilities and N labels", probs.shape, y.shape)
    if probs.shape[0] < 1:
        raise ShapeError("cross_entropy", "empty batch", probs.shape)
    if _DEBUG and np.max(np.abs(probs.data.sum(axis=1) - 1)) > 1e-6:
        raise ValueError("cross_entropy: probability rows must sum to 1")
    dt = probs.data.dtype
    y = y.astype(dt)
    n = probs.shape[0]
    p1 = probs.data[:, 1]
    pos = np.maximum(p1, PROB_FLOOR)
    neg = np.maximum(1 - p1, PROB_FLOOR)
    loss = -(y * np.log(pos) + (1 - y) * np.log(neg)).sum() / n
    out = _result(np.asarray(loss, dtype=dt), (probs,), "cross_entropy")

    def _backward(g):
        d1 = -(y * (p1 > PROB_FLOOR) / pos - (1 - y) * ((1 - p1) > PROB_FLOOR) / neg) / n
        dp = np.zeros_like(probs.data)
        dp[:, 1] = d1 * g
        return [(probs, dp)]

    out._backward = _backward
    return out


# ------------------------------------------------------------------ optimizer

class Adam:
    """Bias-corrected Adam with a step-decay schedule on the learning rate.

    The effective rate at epoch ``e`` is ``lr * decay_factor ** (e // decay_every)``;
    the trainer announces the epoch through :meth:`set_epoch`.
    """

    def __init__(self, named_params, lr=1e-5, beta1=0.9, beta2=0.999, eps=1e-8,
                 decay_factor=1.0, decay_every=5):
        if lr <= 0 or not 0 < beta1 < 1 or not 0 < beta2 < 1 or eps <= 0:
            raise ValueError("invalid Adam hyper-parameters")
        if not 0 < decay_factor <= 1 or decay_every < 1:
            raise ValueError("decay_factor must be in (0, 1] and decay_every >= 1")
        self.params = list(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.decay_factor, self.decay_every = decay_factor, decay_every
        self.step_count = 0
        self.epoch = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def effective_lr(self, epoch: int | None = None) -> float:
        e = self.epoch if epoch is None else epoch
        return self.lr * self.decay_factor ** (e // self.decay_every)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        lr = self.effective_lr()
        c1 = 1 - self.beta1 ** t
        c2 = 1 - self.beta2 ** t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / c1
            vhat = v / c2
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)
