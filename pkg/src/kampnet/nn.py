"""Parameterized layers and the mini residual network built on ``autodiff``."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Minimal container: parameters, buffers, child modules, train/eval flag."""

    def __init__(self):
        self._params = OrderedDict()
        self._buffers = OrderedDict()
        self._children = OrderedDict()
        self.training = True

    def add_param(self, name, array):
        t = Tensor(array, requires_grad=True, dtype=array.dtype)
        self._params[name] = t
        return t

    def add_buffer(self, name, array):
        self._buffers[name] = array
        return array

    def add_module(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def state_dict(self):
        """Copies of every parameter and buffer, keyed by dotted name."""
        state = OrderedDict((k, p.data.copy()) for k, p in self.named_parameters())
        state.update((k, b.copy()) for k, b in self.named_buffers())
        return state

    def load_state_dict(self, state, strict=True):
        targets = OrderedDict((k, p.data) for k, p in self.named_parameters())
        targets.update(self.named_buffers())
        missing = [k for k in targets if k not in state]
        unexpected = [k for k in state if k not in targets]
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for k, dst in targets.items():
            if k not in state:
                continue
            src = np.asarray(state[k])
            if src.shape != dst.shape:
                raise ValueError(f"shape mismatch for {k}: {src.shape} vs {dst.shape}")
            dst[...] = src

    def train(self, mode=True):
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0, bias=False, dtype=np.float32):
        super().__init__()
        fan_in = in_ch * kernel * kernel
        self.stride, self.padding = stride, padding
        self.weight = self.add_param(
            "weight", (rng.standard_normal((out_ch, in_ch, kernel, kernel)) * np.sqrt(2.0 / fan_in)).astype(dtype))
        self.bias = self.add_param("bias", np.zeros(out_ch, dtype=dtype)) if bias else None

    def forward(self, x):
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = self.add_param("gamma", np.ones(channels, dtype=dtype))
        self.beta = self.add_param("beta", np.zeros(channels, dtype=dtype))
        self.running_mean = self.add_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.running_var = self.add_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x):
        return ad.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              training=self.training, momentum=self.momentum, eps=self.eps)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, dtype=np.float32):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.weight = self.add_param(
            "weight", (rng.standard_normal((out_features, in_features)) * np.sqrt(1.0 / in_features)).astype(dtype))
        self.bias = self.add_param("bias", np.zeros(out_features, dtype=dtype))

    def forward(self, x):
        return ad.linear(x, self.weight, self.bias)


class BasicBlock(Module):
    """Two 3x3 conv-BN layers with an identity (or 1x1 projection) shortcut."""

    def __init__(self, in_ch, out_ch, stride, rng, dtype=np.float32):
        super().__init__()
        self.conv1 = self.add_module("conv1", Conv2d(in_ch, out_ch, 3, rng, stride=stride, padding=1, dtype=dtype))
        self.bn1 = self.add_module("bn1", BatchNorm2d(out_ch, dtype=dtype))
        self.conv2 = self.add_module("conv2", Conv2d(out_ch, out_ch, 3, rng, padding=1, dtype=dtype))
        self.bn2 = self.add_module("bn2", BatchNorm2d(out_ch, dtype=dtype))
        self.proj = None
        if stride != 1 or in_ch != out_ch:
            self.proj = self.add_module("proj", Conv2d(in_ch, out_ch, 1, rng, stride=stride, dtype=dtype))
            self.proj_bn = self.add_module("proj_bn", BatchNorm2d(out_ch, dtype=dtype))

    def forward(self, x):
        out = ad.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        shortcut = x if self.proj is None else self.proj_bn(self.proj(x))
        return ad.relu(ad.add(out, shortcut))


class ResNetTrunk(Module):
    """Convolutional segment of a small ResNet: stem, residual stages, no head.

    ``features`` returns the final (N, C, h, w) maps; ``forward`` returns their
    global average, a (N, C) feature vector.
    """

    def __init__(self, in_channels, widths, blocks, rng, stem_width=None, dtype=np.float32):
        super().__init__()
        if len(widths) != len(blocks) or not widths:
            raise ValueError("widths and blocks must be non-empty and of equal length")
        stem_width = stem_width or widths[0]
        self.stem = self.add_module("stem", Conv2d(in_channels, stem_width, 3, rng, padding=1, dtype=dtype))
        self.stem_bn = self.add_module("stem_bn", BatchNorm2d(stem_width, dtype=dtype))
        self.blocks = []
        ch = stem_width
        for s, (width, count) in enumerate(zip(widths, blocks)):
            for b in range(count):
                stride = 2 if (s > 0 and b == 0) else 1
                blk = self.add_module(f"layer{s + 1}.{b}", BasicBlock(ch, width, stride, rng, dtype=dtype))
                self.blocks.append(blk)
                ch = width
        self.out_channels = ch

    def features(self, x):
        out = ad.relu(self.stem_bn(self.stem(x)))
        out = ad.maxpool2d(out, 2)
        for blk in self.blocks:
            out = blk(out)
        return out

    def forward(self, x):
        return ad.global_avgpool2d(self.features(x))
