"""ResNet-like quality-control supernet.

Consumes concat(image, 2-channel mask, uncertainty map) and regresses the
expected Dice through alternating Contracting / Non-scaling searched cells
(odd positions contract, 1-indexed), a global average pool and a sigmoid
head. Channels double at every Contracting cell from the stem's filter
count.
"""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .cells import CellTopology, QcCell, topology_for
from .seg import op_extra
from .tensor import Tensor


class QcSupernet:
    def __init__(self, in_channels: int = 6, pairs: int = 3, m: int = 3,
                 filters: int = 8, *, rng: np.random.Generator,
                 dtype=np.float32):
        self.in_channels = in_channels
        self.pairs = pairs
        self.m = m
        self.filters = filters
        self.dtype = dtype
        self.stem_conv = nn.Conv2d(in_channels, filters, 3, padding=1,
                                   rng=rng, dtype=dtype)
        self.stem_bn = nn.BatchNorm2d(filters, dtype=dtype)
        self.cells: list[QcCell] = []
        cin = filters
        for _ in range(pairs):
            c = 2 * cin
            self.cells.append(QcCell("Contracting", m, cin, c, rng=rng, dtype=dtype))
            self.cells.append(QcCell("NonScaling", m, c, c, rng=rng, dtype=dtype))
            cin = c
        self.out_channels = cin
        self.head = nn.Linear(cin, 1, rng=rng, dtype=dtype, zero_init=True)

    def topologies(self) -> list[CellTopology]:
        return [topology_for("Contracting", self.m),
                topology_for("NonScaling", self.m)]

    def forward_features(self, x: Tensor, alpha) -> Tensor:
        h = self.stem_bn(self.stem_conv(x))
        for cell in self.cells:
            h = cell.forward(h, alpha.tables[cell.kind])
        return h

    def predict(self, image: Tensor, mask2: Tensor, uncertainty: Tensor,
                alpha) -> Tensor:
        """Per-sample quality score in (0, 1); mask2 is a 2-channel encoding
        (soft probabilities during joint search, one-hot otherwise)."""
        shapes = {t.data.shape[2:] for t in (image, mask2, uncertainty)}
        if len(shapes) != 1:
            raise ValueError(f"spatial dims disagree across QC inputs: {shapes}")
        x = T.concat([image, mask2, uncertainty], axis=1)
        feats = self.forward_features(x, alpha)
        pooled = T.global_avg_pool(feats)
        return T.sigmoid(self.head(pooled).reshape(-1))

    # -- state ------------------------------------------------------------

    def _cell_name(self, idx: int) -> str:
        return f"cell{idx + 1}_{'C' if idx % 2 == 0 else 'N'}"

    def named_params(self):
        yield from nn.prefixed("qc.stem.conv", self.stem_conv.named_params())
        yield from nn.prefixed("qc.stem.bn", self.stem_bn.named_params())
        for i, cell in enumerate(self.cells):
            yield from nn.prefixed(f"qc.{self._cell_name(i)}", cell.named_params())
        yield from nn.prefixed("qc.head", self.head.named_params())

    def named_buffers(self):
        yield from nn.prefixed("qc.stem.bn", self.stem_bn.named_buffers())
        for i, cell in enumerate(self.cells):
            yield from nn.prefixed(f"qc.{self._cell_name(i)}", cell.named_buffers())

    def parameters(self):
        return [t for _, t in self.named_params()]

    # -- static accounting --------------------------------------------------

    def flops(self, h: int, w: int) -> int:
        total = self.stem_conv.flops(h, w)
        lvl = 0
        for cell in self.cells:
            ch, cw = h >> lvl, w >> lvl
            total += cell.prep.flops(ch, cw)
            if cell.res_conv is not None:
                total += cell.res_conv.flops(ch, cw)
            mid_lvl = lvl + (1 if cell.kind == "Contracting" else 0)
            for e_idx, e in enumerate(cell.topology.edges):
                eh = (ch, cw) if e.src == 0 else (h >> mid_lvl, w >> mid_lvl)
                for op in cell.edge_ops[e_idx]:
                    total += op.flops(*eh)
            lvl = mid_lvl
        total += self.head.flops()
        return total

    def latency_items(self, n: int, h: int, w: int):
        searched = []
        fixed = []

        def conv_prepare(layer, cin, fh, fw):
            def prepare(rng):
                x = Tensor(rng.normal(size=(n, cin, fh, fw)).astype(self.dtype))
                return lambda: layer(x)
            return prepare

        fixed.append((("qc_stem3x3", n, self.in_channels, self.filters, h, w, "-"),
                      conv_prepare(lambda t: self.stem_bn(self.stem_conv(t)),
                                   self.in_channels, h, w)))

        def concat_prepare(rng):
            a = Tensor(rng.normal(size=(n, 3, h, w)).astype(self.dtype))
            b = Tensor(rng.normal(size=(n, 2, h, w)).astype(self.dtype))
            c = Tensor(rng.normal(size=(n, 1, h, w)).astype(self.dtype))
            return lambda: T.concat([a, b, c], axis=1)

        fixed.append((("concat6", n, 6, 6, h, w, "-"), concat_prepare))

        lvl = 0
        for idx, cell in enumerate(self.cells):
            name = self._cell_name(idx)
            ch, cw = h >> lvl, w >> lvl
            fixed.append(((f"prep1x1_s1", n, cell.cin, cell.c, ch, cw, "-"),
                          conv_prepare(cell.prep, cell.cin, ch, cw)))
            if cell.res_conv is not None:
                fixed.append((("residual_proj1x1", n, cell.cin, cell.c, ch, cw, "-"),
                              conv_prepare(cell.residual, cell.cin, ch, cw)))
            mid_lvl = lvl + (1 if cell.kind == "Contracting" else 0)
            for e_idx, e in enumerate(cell.topology.edges):
                eh, ew = (ch, cw) if e.src == 0 else (h >> mid_lvl, w >> mid_lvl)
                keys = tuple(
                    (op.op_id, n, cell.c, cell.c, eh, ew, op_extra(op.op_id))
                    for op in cell.edge_ops[e_idx])
                searched.append({"cell": name, "kind": cell.kind,
                                 "edge_idx": e_idx, "keys": keys,
                                 "ops": cell.edge_ops[e_idx], "hw": (eh, ew)})
            lvl = mid_lvl

        def head_prepare(rng):
            x = Tensor(rng.normal(size=(n, self.out_channels, h >> lvl,
                                        w >> lvl)).astype(self.dtype))
            return lambda: T.sigmoid(self.head(T.global_avg_pool(x)).reshape(-1))

        fixed.append((("qc_head", n, self.out_channels, 1, h >> lvl, w >> lvl, "-"),
                      head_prepare))
        return searched, fixed
