"""U-net-like segmentation supernet: stacked Down and Up searched cells.

The encoder halves resolution and doubles channels per Down cell starting
from the stem's filter count; the decoder mirrors it with Up cells whose
second input is the same-resolution encoder feature (skip connection).
Outputs are 2-class mask logits plus a per-pixel softmax-entropy
uncertainty map.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import nn
from . import tensor as T
from .cells import CellTopology, SegCell, topology_for
from .ops import _SPEC
from .tensor import Tensor


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|A.B| / (|A|+|B|) on binary masks; both-empty counts as 1.0."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"dice: shape mismatch {pred.shape} vs {gt.shape}")
    total = pred.sum() + gt.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, gt).sum() / total)


def dice_batch(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return np.array([dice(p, g) for p, g in zip(pred, gt)])


def op_extra(op_id: str) -> str:
    _, stride, dilation, _ = _SPEC[op_id]
    return f"s{stride}d{dilation}"


def seg_layout(depth: int, filters: int):
    """Shared encoder/decoder layout: cell plan plus channel/level lookups.

    Levels count powers-of-two downsampling from the input resolution; a
    cell's inputs are preprocessed to `level_in` and its intermediates (and
    output) live one level below (Down) or above (Up).
    """

    def chan(name: str) -> int:
        if name == "stem":
            return filters
        kind, idx = name[:-1], int(name[-1])
        return filters * 2 ** (idx if kind == "down" else depth - idx)

    def level(name: str) -> int:
        if name == "stem":
            return 0
        kind, idx = name[:-1], int(name[-1])
        return idx if kind == "down" else depth - idx

    plan = []  # (name, kind, src_a, src_b, level_in)
    for i in range(1, depth + 1):
        src_a = "stem" if i <= 2 else f"down{i - 2}"
        src_b = "stem" if i == 1 else f"down{i - 1}"
        plan.append((f"down{i}", "DownCell", src_a, src_b, i - 1))
    for j in range(1, depth + 1):
        src_a = f"down{depth}" if j == 1 else f"up{j - 1}"
        src_b = f"down{depth - j}" if depth - j >= 1 else "stem"
        plan.append((f"up{j}", "UpCell", src_a, src_b, depth - j + 1))
    return plan, chan, level


class SegSupernet:
    def __init__(self, in_channels: int = 3, depth: int = 3, m: int = 3,
                 filters: int = 4, *, rng: np.random.Generator,
                 dtype=np.float32):
        self.in_channels = in_channels
        self.depth = depth
        self.m = m
        self.filters = filters
        self.dtype = dtype
        self.stem_conv = nn.Conv2d(in_channels, filters, 3, padding=1,
                                   rng=rng, dtype=dtype)
        self.stem_bn = nn.BatchNorm2d(filters, dtype=dtype)
        self.plan, self._chan, self._level = seg_layout(depth, filters)
        plan, chan, level = self.plan, self._chan, self._level

        self.cells: dict[str, SegCell] = {}
        for name, kind, src_a, src_b, level_in in plan:
            c = chan(name)
            self.cells[name] = SegCell(
                kind, m, chan(src_a), chan(src_b), c,
                stride_a=2 ** (level_in - level(src_a)),
                stride_b=2 ** (level_in - level(src_b)),
                rng=rng, dtype=dtype)

        self.head = nn.Conv2d(filters, 2, 1, padding=0, rng=rng, dtype=dtype)

    def topologies(self) -> list[CellTopology]:
        return [topology_for("DownCell", self.m), topology_for("UpCell", self.m)]

    def forward(self, image: Tensor, alpha) -> tuple[Tensor, Tensor, np.ndarray]:
        h, w = image.data.shape[2], image.data.shape[3]
        div = 2 ** self.depth
        if h % div or w % div:
            raise ValueError(
                f"input spatial dims {h}x{w} must be divisible by 2^depth = {div}")
        outs = {"stem": self.stem_bn(self.stem_conv(image))}
        for name, kind, src_a, src_b, _ in self.plan:
            outs[name] = self.cells[name].forward(
                outs[src_a], outs[src_b], alpha.tables[kind])
        logits = self.head(outs[f"up{self.depth}"])
        uncertainty = T.softmax_entropy(logits, axis=1)
        mask = np.argmax(logits.data, axis=1)
        return logits, uncertainty, mask

    # -- state ------------------------------------------------------------

    def named_params(self):
        yield from nn.prefixed("seg.stem.conv", self.stem_conv.named_params())
        yield from nn.prefixed("seg.stem.bn", self.stem_bn.named_params())
        for name, *_ in self.plan:
            yield from nn.prefixed(f"seg.{name}", self.cells[name].named_params())
        yield from nn.prefixed("seg.head", self.head.named_params())

    def named_buffers(self):
        yield from nn.prefixed("seg.stem.bn", self.stem_bn.named_buffers())
        for name, *_ in self.plan:
            yield from nn.prefixed(f"seg.{name}", self.cells[name].named_buffers())

    def parameters(self):
        return [t for _, t in self.named_params()]

    # -- static accounting --------------------------------------------------

    def _edge_hw(self, cell_name: str, level_in: int, edge, h: int, w: int):
        lvl = level_in if edge.src in (0, 1) else self._mid_level(cell_name)
        return h >> lvl, w >> lvl

    def _mid_level(self, cell_name: str) -> int:
        return self._level(cell_name)

    def flops(self, h: int, w: int) -> int:
        """FLOPs with every candidate on every edge evaluated (supernet cost)."""
        total = self.stem_conv.flops(h, w)
        for name, kind, src_a, src_b, level_in in self.plan:
            cell = self.cells[name]
            ha, wa = h >> self._level(src_a), w >> self._level(src_a)
            hb, wb = h >> self._level(src_b), w >> self._level(src_b)
            total += cell.prep_a.flops(ha, wa) + cell.prep_b.flops(hb, wb)
            for e_idx, e in enumerate(cell.topology.edges):
                eh, ew = self._edge_hw(name, level_in, e, h, w)
                for op in cell.edge_ops[e_idx]:
                    total += op.flops(eh, ew)
        total += self.head.flops(h, w)
        return total

    def latency_items(self, n: int, h: int, w: int):
        """(searched, fixed) latency bookkeeping at a concrete input size.

        searched: one record per cell instance per edge with per-candidate
        LUT keys and the live OpInstances (for profiling).
        fixed: (key, prepare) pairs for the non-searched components; prepare
        binds a fresh random input and returns a zero-arg callable.
        """
        searched = []
        fixed = []

        def fkey(name, cin, cout, fh, fw, extra="-"):
            return (name, n, cin, cout, fh, fw, extra)

        def conv_prepare(layer, cin, fh, fw):
            def prepare(rng):
                x = Tensor(rng.normal(size=(n, cin, fh, fw)).astype(self.dtype))
                return lambda: layer(x)
            return prepare

        fixed.append((fkey("stem3x3", self.in_channels, self.filters, h, w),
                      conv_prepare(lambda t: self.stem_bn(self.stem_conv(t)),
                                   self.in_channels, h, w)))
        for name, kind, src_a, src_b, level_in in self.plan:
            cell = self.cells[name]
            c = cell.c
            for prep, src in ((cell.prep_a, src_a), (cell.prep_b, src_b)):
                sh, sw = h >> self._level(src), w >> self._level(src)
                fixed.append((fkey(f"prep1x1_s{prep.stride}", self._chan(src),
                                   c, sh, sw),
                              conv_prepare(prep, self._chan(src), sh, sw)))
            for e_idx, e in enumerate(cell.topology.edges):
                eh, ew = self._edge_hw(name, level_in, e, h, w)
                keys = tuple(
                    (op.op_id, n, c, c, eh, ew, op_extra(op.op_id))
                    for op in cell.edge_ops[e_idx])
                searched.append({"cell": name, "kind": kind, "edge_idx": e_idx,
                                 "keys": keys, "ops": cell.edge_ops[e_idx],
                                 "hw": (eh, ew)})
        fixed.append((fkey("mask_head1x1", self.filters, 2, h, w),
                      conv_prepare(self.head, self.filters, h, w)))

        def entropy_prepare(rng):
            x = Tensor(rng.normal(size=(n, 2, h, w)).astype(self.dtype))
            return lambda: T.softmax_entropy(x, axis=1)

        fixed.append((fkey("entropy_map", 2, 1, h, w), entropy_prepare))
        return searched, fixed
