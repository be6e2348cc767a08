"""Parameterized layers built on the autodiff engine.

Layers own their weights as Tensors and expose (name, tensor) pairs through
named_params / named_buffers so that networks can assemble flat state dicts
for optimizers and checkpoints. Batch-norm train/eval behaviour is driven by
a module-level mode, set with the `mode` context manager; `update_stats`
exists so architecture-parameter steps can use batch statistics without
mutating the running buffers.
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterator, Optional

import numpy as np

from . import conv as C
from . import tensor as T
from .tensor import Tensor

_TRAINING = False
_UPDATE_STATS = True


@contextlib.contextmanager
def mode(training: bool, update_stats: bool = True):
    global _TRAINING, _UPDATE_STATS
    prev = (_TRAINING, _UPDATE_STATS)
    _TRAINING, _UPDATE_STATS = training, update_stats
    try:
        yield
    finally:
        _TRAINING, _UPDATE_STATS = prev


def is_training() -> bool:
    return _TRAINING


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype),
                  requires_grad=True)


class Conv2d:
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1,
                 dilation: int = 1, padding: Optional[int] = None, *,
                 rng: np.random.Generator, dtype=np.float32):
        self.stride = stride
        self.dilation = dilation
        self.padding = padding
        self.w = kaiming_uniform(rng, (cout, cin, k, k), cin * k * k, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return C.conv2d(x, self.w, stride=self.stride, dilation=self.dilation,
                        padding=self.padding)

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        yield "w", self.w

    def named_buffers(self):
        yield from ()

    def flops(self, h: int, w: int) -> int:
        cout, cin, k, _ = self.w.data.shape
        pad = self.padding if self.padding is not None else self.dilation * (k - 1) // 2
        ho, wo = C.conv_out_hw(h, w, k, self.stride, pad, self.dilation)
        return 2 * cout * cin * k * k * ho * wo


class ConvTranspose2d:
    """Fixed stride-2 3x3 transpose conv; doubles H and W."""

    def __init__(self, cin: int, cout: int, *, rng: np.random.Generator,
                 dtype=np.float32):
        self.w = kaiming_uniform(rng, (cin, cout, 3, 3), cin * 9, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return C.conv2d_transpose(x, self.w)

    def named_params(self):
        yield "w", self.w

    def named_buffers(self):
        yield from ()

    def flops(self, h: int, w: int) -> int:
        cin, cout, k, _ = self.w.data.shape
        # each input position contributes k*k MACs per (cin, cout) pair
        return 2 * cin * cout * k * k * h * w


class SeparableConv2d:
    """Depthwise 3x3 followed by a pointwise 1x1."""

    def __init__(self, cin: int, cout: int, stride: int = 1, dilation: int = 1,
                 *, rng: np.random.Generator, dtype=np.float32):
        self.stride = stride
        self.dilation = dilation
        self.dw = kaiming_uniform(rng, (cin, 3, 3), 9, dtype)
        self.pw = kaiming_uniform(rng, (cout, cin, 1, 1), cin, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return C.separable_conv2d(x, self.dw, self.pw, stride=self.stride,
                                  dilation=self.dilation)

    def named_params(self):
        yield "dw", self.dw
        yield "pw", self.pw

    def named_buffers(self):
        yield from ()

    def flops(self, h: int, w: int) -> int:
        cin = self.dw.data.shape[0]
        cout = self.pw.data.shape[0]
        pad = self.dilation
        ho, wo = C.conv_out_hw(h, w, 3, self.stride, pad, self.dilation)
        return 2 * cin * 9 * ho * wo + 2 * cout * cin * ho * wo


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               momentum: float, eps: float) -> Tensor:
    """Per-channel batch norm over (N, H, W); batch statistics in training
    mode (running buffers updated in place unless stat updates are off),
    running statistics in eval mode."""
    training = _TRAINING
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if _UPDATE_STATS:
            n = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
            unbiased = var * n / max(n - 1, 1)
            running_mean += momentum * (mu - running_mean)
            running_var += momentum * (unbiased - running_var)
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(go):
        dgamma = (go * xhat).sum(axis=(0, 2, 3))
        dbeta = go.sum(axis=(0, 2, 3))
        scale = (gamma.data * inv)[None, :, None, None]
        if training:
            gmean = go.mean(axis=(0, 2, 3))[None, :, None, None]
            cmean = (go * xhat).mean(axis=(0, 2, 3))[None, :, None, None]
            dx = scale * (go - gmean - xhat * cmean)
        else:
            dx = go * scale
        return dx, dgamma, dbeta

    return T._make(data, (x, gamma, beta), backward)


class BatchNorm2d:
    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5, *,
                 dtype=np.float32):
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean,
                          self.running_var, self.momentum, self.eps)

    def named_params(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    def named_buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var

    def flops(self, h: int, w: int) -> int:
        return 0


def bn_fused(bns: list["BatchNorm2d"], x: Tensor) -> Tensor:
    """One batch-norm pass over the channel-concatenated outputs of several
    layers; per-channel statistics make it exactly equivalent to applying
    each BN to its own slice. Running buffers are written back per layer."""
    gamma = T.concat([bn.gamma for bn in bns], axis=0)
    beta = T.concat([bn.beta for bn in bns], axis=0)
    rm = np.concatenate([bn.running_mean for bn in bns])
    rv = np.concatenate([bn.running_var for bn in bns])
    out = batch_norm(x, gamma, beta, rm, rv, bns[0].momentum, bns[0].eps)
    if _TRAINING and _UPDATE_STATS:
        off = 0
        for bn in bns:
            c = bn.running_mean.size
            bn.running_mean[:] = rm[off:off + c]
            bn.running_var[:] = rv[off:off + c]
            off += c
    return out

    def named_params(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    def named_buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var

    def flops(self, h: int, w: int) -> int:
        return 0


class Linear:
    def __init__(self, fin: int, fout: int, *, rng: np.random.Generator,
                 dtype=np.float32, zero_init: bool = False):
        # zero_init: regression heads behind a sigmoid start at 0.5 instead
        # of deep in a saturated tail where the gradient vanishes
        if zero_init:
            self.w = Tensor(np.zeros((fin, fout), dtype=dtype),
                            requires_grad=True)
        else:
            self.w = kaiming_uniform(rng, (fin, fout), fin, dtype)
        self.b = Tensor(np.zeros(fout, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)

    def named_params(self):
        yield "w", self.w
        yield "b", self.b

    def named_buffers(self):
        yield from ()

    def flops(self) -> int:
        fin, fout = self.w.data.shape
        return 2 * fin * fout


def collect_params(named) -> list[Tensor]:
    return [t for _, t in named]


def prefixed(prefix: str, it) -> Iterator[tuple[str, object]]:
    for name, obj in it:
        yield f"{prefix}.{name}", obj
