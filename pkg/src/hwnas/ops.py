"""Primitive operation catalog shared by the supernets and the profiler.

Three candidate sets: Down ops halve the spatial dims, Up ops double them,
Normal ops preserve them. All kernels are 3x3; dilated variants use
dilation 2 with padding that keeps the set's spatial contract. Conv-bearing
primitives are wrapped ReLU -> conv -> batch-norm; pooling, identity and
zero are bare. "up_conv" is a true stride-2 transpose convolution; the other
up variants are nearest-neighbor 2x upsampling followed by the named
stride-1 convolution.
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import conv as C
from . import nn
from . import tensor as T
from .tensor import Tensor

DOWN_OPS = ("down_conv", "down_dilated_conv", "down_separable_conv",
            "max_pool", "avg_pool")
UP_OPS = ("up_conv", "up_dilated_conv", "up_separable_conv")
NORMAL_OPS = ("conv", "dilated_conv", "separable_conv", "identity", "zero")

OP_SETS: dict[str, tuple[str, ...]] = {
    "Down": DOWN_OPS,
    "Up": UP_OPS,
    "Normal": NORMAL_OPS,
}

_PARAMFREE = {"max_pool", "avg_pool", "identity", "zero"}

# (scale, stride, dilation, upsample-first) per op id; scale in {1/2, 1, 2}
_SPEC = {
    "down_conv": ("down", 2, 1, False),
    "down_dilated_conv": ("down", 2, 2, False),
    "down_separable_conv": ("down", 2, 1, False),
    "max_pool": ("down", 2, 1, False),
    "avg_pool": ("down", 2, 1, False),
    "up_conv": ("up", 2, 1, False),
    "up_dilated_conv": ("up", 1, 2, True),
    "up_separable_conv": ("up", 1, 1, True),
    "conv": ("same", 1, 1, False),
    "dilated_conv": ("same", 1, 2, False),
    "separable_conv": ("same", 1, 1, False),
    "identity": ("same", 1, 1, False),
    "zero": ("same", 1, 1, False),
}


def op_set_of(op_id: str) -> str:
    for set_name, ids in OP_SETS.items():
        if op_id in ids:
            return set_name
    raise KeyError(f"unknown op id {op_id!r}")


class OpInstance:
    """One instantiated primitive; applies to (N, cin, H, W) tensors."""

    def __init__(self, op_id: str, cin: int, cout: int, *,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        if op_id not in _SPEC:
            raise KeyError(f"unknown op id {op_id!r}")
        if cin <= 0 or cout <= 0:
            raise ValueError(f"{op_id}: channel counts must be positive")
        if op_id in _PARAMFREE and cin != cout:
            raise ValueError(
                f"{op_id} requires cin == cout, got cin={cin} cout={cout}")
        self.op_id = op_id
        self.cin = cin
        self.cout = cout
        self.scale, self.stride, self.dilation, self.upsample_first = _SPEC[op_id]
        self.conv = None
        self.bn = None
        if op_id not in _PARAMFREE:
            if rng is None:
                raise ValueError(f"{op_id} has parameters and needs an rng")
            if op_id == "up_conv":
                self.conv = nn.ConvTranspose2d(cin, cout, rng=rng, dtype=dtype)
            elif "separable" in op_id:
                self.conv = nn.SeparableConv2d(cin, cout, stride=self.stride,
                                                dilation=self.dilation,
                                                rng=rng, dtype=dtype)
            else:
                self.conv = nn.Conv2d(cin, cout, 3, stride=self.stride,
                                       dilation=self.dilation, rng=rng,
                                       dtype=dtype)
            self.bn = nn.BatchNorm2d(cout, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.shape[1] != self.cin:
            raise ValueError(
                f"{self.op_id}: input has {x.data.shape[1]} channels, expected {self.cin}")
        if self.op_id == "zero":
            return Tensor(np.zeros_like(x.data))
        if self.op_id == "identity":
            return x
        if self.op_id == "max_pool":
            return C.pool2d(x, "max")
        if self.op_id == "avg_pool":
            return C.pool2d(x, "avg")
        h = T.relu(x)
        if self.upsample_first:
            h = T.upsample_nearest2x(h)
        return self.bn(self.conv(h))

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        if self.scale == "down":
            return h // 2, w // 2
        if self.scale == "up":
            return 2 * h, 2 * w
        return h, w

    def flops(self, h: int, w: int) -> int:
        """Exact multiply-accumulate count x2 for convs, k^2 per output cell
        for pooling; batch-norm/ReLU are not counted."""
        ho, wo = self.out_hw(h, w)
        if self.op_id in ("identity", "zero"):
            return 0
        if self.op_id in ("max_pool", "avg_pool"):
            return 9 * ho * wo * self.cin
        if self.op_id == "up_conv":
            return self.conv.flops(h, w)
        if self.upsample_first:
            return self.conv.flops(2 * h, 2 * w)
        return self.conv.flops(h, w)

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        if self.conv is not None:
            yield from nn.prefixed("conv", self.conv.named_params())
        if self.bn is not None:
            yield from nn.prefixed("bn", self.bn.named_params())

    def named_buffers(self):
        if self.bn is not None:
            yield from nn.prefixed("bn", self.bn.named_buffers())


def instantiate(op_id: str, cin: int, cout: int, *,
                rng: Optional[np.random.Generator] = None,
                dtype=np.float32) -> OpInstance:
    return OpInstance(op_id, cin, cout, rng=rng, dtype=dtype)
