"""Searched cells: mixed-operation DAGs weighted by architecture logits.

Segmentation cells have two inputs (nodes 0 and 1), m intermediate nodes and
an output node; every intermediate receives one searched scaling edge from
each input plus Normal edges from all earlier intermediates, and the output
node sums one searched Normal edge per intermediate. That gives
2m + m(m+1)/2 searched edges (12 for m = 3).

Quality-control cells have a single input (node 0) and no searched output
edges: m input edges plus m(m-1)/2 inter-node edges (6 for m = 3). Their
output is the sum of the intermediates plus a fixed residual path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import nn
from . import tensor as T
from .ops import OP_SETS, OpInstance
from .tensor import Tensor


@dataclass(frozen=True)
class EdgeSpec:
    src: int
    dst: int
    set_name: str

    @property
    def candidates(self) -> tuple[str, ...]:
        return OP_SETS[self.set_name]


def seg_cell_edges(m: int, kind: str) -> list[EdgeSpec]:
    scaling = "Down" if kind == "DownCell" else "Up"
    edges = []
    for j in range(2, m + 2):
        edges.append(EdgeSpec(0, j, scaling))
        edges.append(EdgeSpec(1, j, scaling))
        for i in range(2, j):
            edges.append(EdgeSpec(i, j, "Normal"))
    out_node = m + 2
    for i in range(2, m + 2):
        edges.append(EdgeSpec(i, out_node, "Normal"))
    return edges


def qc_cell_edges(m: int, kind: str) -> list[EdgeSpec]:
    scaling = "Down" if kind == "Contracting" else "Normal"
    edges = []
    for j in range(1, m + 1):
        edges.append(EdgeSpec(0, j, scaling))
        for i in range(1, j):
            edges.append(EdgeSpec(i, j, "Normal"))
    return edges


@dataclass(frozen=True)
class CellTopology:
    kind: str
    m: int
    edges: tuple[EdgeSpec, ...]


def topology_for(kind: str, m: int) -> CellTopology:
    if kind in ("DownCell", "UpCell"):
        edges = seg_cell_edges(m, kind)
    elif kind in ("Contracting", "NonScaling"):
        edges = qc_cell_edges(m, kind)
    else:
        raise KeyError(f"unknown cell kind {kind!r}")
    return CellTopology(kind, m, tuple(edges))


class ArchParams:
    """Architecture logits: one vector per searched edge per cell kind,
    shared by every cell of that kind. Initialized to zeros (uniform mix)."""

    def __init__(self, topologies: list[CellTopology], dtype=np.float32):
        self.topologies = {t.kind: t for t in topologies}
        self.tables: dict[str, list[Tensor]] = {}
        for t in topologies:
            self.tables[t.kind] = [
                Tensor(np.zeros(len(e.candidates), dtype=dtype), requires_grad=True)
                for e in t.edges
            ]

    def tensors(self) -> list[Tensor]:
        return [a for kind in self.tables for a in self.tables[kind]]

    def entropy(self) -> float:
        """Mean per-edge entropy of softmax(logits), in nats."""
        vals = []
        for kind in self.tables:
            for a in self.tables[kind]:
                z = a.data - a.data.max()
                p = np.exp(z) / np.exp(z).sum()
                vals.append(float(-(p * np.log(np.maximum(p, 1e-30))).sum()))
        return float(np.mean(vals))

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for kind in self.tables:
            for i, a in enumerate(self.tables[kind]):
                out[f"alpha.{kind}.{i:02d}"] = a.data
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for kind in self.tables:
            for i, a in enumerate(self.tables[kind]):
                src = state[f"alpha.{kind}.{i:02d}"]
                a.data = src.astype(a.data.dtype).copy()

    def set_one_hot(self, kind: str, edge_idx: int, op_id: str,
                    gap: float = 1000.0) -> None:
        """Saturate one edge's logits so softmax is literally one-hot."""
        topo = self.topologies[kind]
        cands = topo.edges[edge_idx].candidates
        k = cands.index(op_id)
        vec = np.zeros(len(cands), dtype=self.tables[kind][edge_idx].dtype)
        vec -= gap
        vec[k] = gap
        self.tables[kind][edge_idx].data = vec


class Preproc:
    """ReLU -> 1x1 conv -> batch-norm input normalizer; stride 2 when the
    source sits one resolution level above the cell's input level."""

    def __init__(self, cin: int, cout: int, stride: int, *, rng, dtype):
        self.stride = stride
        self.conv = nn.Conv2d(cin, cout, 1, stride=stride, padding=0,
                              rng=rng, dtype=dtype)
        self.bn = nn.BatchNorm2d(cout, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(T.relu(x)))

    def named_params(self):
        yield from nn.prefixed("conv", self.conv.named_params())
        yield from nn.prefixed("bn", self.bn.named_params())

    def named_buffers(self):
        yield from nn.prefixed("bn", self.bn.named_buffers())

    def flops(self, h: int, w: int) -> int:
        return self.conv.flops(h, w)


def _mixed_edge_ops(edges, c: int, rng, dtype) -> list[list[OpInstance]]:
    return [[OpInstance(op_id, c, c, rng=rng, dtype=dtype)
             for op_id in e.candidates] for e in edges]


def _fused_outgoing(x: Tensor, entries: list[tuple[int, list[OpInstance]]]
                    ) -> dict[int, list[Tensor]]:
    """Candidate outputs for every outgoing edge of one source node.

    All edges leaving a node draw from the same candidate set, so same-typed
    candidates across the E edges share one ReLU / pooling pass and run their
    convolutions as a single stacked-weight kernel followed by one fused
    batch-norm; per-edge views are then split back out. Mathematically
    identical to applying each OpInstance separately.
    """
    from . import conv as C

    ids = [op.op_id for op in entries[0][1]]
    results: dict[int, list[Tensor]] = {e_idx: [None] * len(ids)
                                        for e_idx, _ in entries}
    relu_x: Optional[Tensor] = None
    up_relu_x: Optional[Tensor] = None

    def base(upsample: bool) -> Tensor:
        nonlocal relu_x, up_relu_x
        if relu_x is None:
            relu_x = T.relu(x)
        if not upsample:
            return relu_x
        if up_relu_x is None:
            up_relu_x = T.upsample_nearest2x(relu_x)
        return up_relu_x

    def assign(k: int, shared: Tensor):
        for e_idx, _ in entries:
            results[e_idx][k] = shared

    def split(k: int, fused: Tensor, cout: int):
        for i, (e_idx, _) in enumerate(entries):
            results[e_idx][k] = T.narrow(fused, 1, i * cout, cout)

    for k, op_id in enumerate(ids):
        ops_k = [ops[k] for _, ops in entries]
        ref = ops_k[0]
        if op_id in ("zero", "identity", "max_pool", "avg_pool"):
            # parameter-free: one evaluation serves every edge
            assign(k, ref(x))
            continue
        h = base(ref.upsample_first)
        bns = [op.bn for op in ops_k]
        if op_id == "up_conv":
            wcat = T.concat([op.conv.w for op in ops_k], axis=1)
            fused = C.conv2d_transpose(h, wcat)
        elif "separable" in op_id:
            tiled = T.concat([h] * len(ops_k), axis=1) if len(ops_k) > 1 else h
            dwcat = T.concat([op.conv.dw for op in ops_k], axis=0)
            mid = C.depthwise_conv2d(tiled, dwcat, stride=ref.stride,
                                     dilation=ref.dilation)
            fused = C.conv1x1_grouped(mid, [op.conv.pw for op in ops_k])
        else:
            wcat = T.concat([op.conv.w for op in ops_k], axis=0)
            fused = C.conv2d(h, wcat, stride=ref.stride, dilation=ref.dilation)
        fused = nn.bn_fused(bns, fused)
        split(k, fused, ref.cout)
    return results


def _run_dag(values: dict[int, Tensor], edges, edge_ops,
             alphas: list[Tensor], targets: list[int]) -> dict[int, Tensor]:
    """Evaluate the cell DAG node by node; each node's outgoing candidate
    outputs are produced by the fused evaluator, then combined per target as
    the sum over incoming edges of softmax(alpha)-weighted candidates."""
    by_src: dict[int, list[int]] = {}
    for e_idx, e in enumerate(edges):
        by_src.setdefault(e.src, []).append(e_idx)
    cand: dict[int, list[Tensor]] = {}

    def emit(node: int):
        if node in by_src:
            entries = [(e_idx, edge_ops[e_idx]) for e_idx in by_src[node]]
            cand.update(_fused_outgoing(values[node], entries))

    for s in sorted(values):
        emit(s)
    for j in targets:
        acc: Optional[Tensor] = None
        for e_idx, e in enumerate(edges):
            if e.dst != j:
                continue
            mixed = T.weighted_sum(T.softmax(alphas[e_idx], axis=0), cand[e_idx])
            acc = mixed if acc is None else acc + mixed
        values[j] = acc
        emit(j)
    return values


class SegCell:
    """Two-input searched cell (DownCell or UpCell)."""

    def __init__(self, kind: str, m: int, cin_a: int, cin_b: int, c: int,
                 stride_a: int, stride_b: int, *, rng, dtype):
        self.kind = kind
        self.m = m
        self.c = c
        self.topology = topology_for(kind, m)
        self.prep_a = Preproc(cin_a, c, stride_a, rng=rng, dtype=dtype)
        self.prep_b = Preproc(cin_b, c, stride_b, rng=rng, dtype=dtype)
        self.edge_ops = _mixed_edge_ops(self.topology.edges, c, rng, dtype)

    def forward(self, xa: Tensor, xb: Tensor, alphas: list[Tensor]) -> Tensor:
        va, vb = self.prep_a(xa), self.prep_b(xb)
        if va.shape != vb.shape:
            raise ValueError(
                f"{self.kind}: preprocessed inputs disagree: {va.shape} vs {vb.shape}")
        values = {0: va, 1: vb}
        targets = list(range(2, self.m + 2)) + [self.m + 2]
        _run_dag(values, self.topology.edges, self.edge_ops, alphas, targets)
        return values[self.m + 2]

    def named_params(self):
        yield from nn.prefixed("prep_a", self.prep_a.named_params())
        yield from nn.prefixed("prep_b", self.prep_b.named_params())
        for e_idx, e in enumerate(self.topology.edges):
            for k, op in enumerate(self.edge_ops[e_idx]):
                yield from nn.prefixed(f"e{e.src}-{e.dst}.{op.op_id}",
                                       op.named_params())

    def named_buffers(self):
        yield from nn.prefixed("prep_a", self.prep_a.named_buffers())
        yield from nn.prefixed("prep_b", self.prep_b.named_buffers())
        for e_idx, e in enumerate(self.topology.edges):
            for op in self.edge_ops[e_idx]:
                yield from nn.prefixed(f"e{e.src}-{e.dst}.{op.op_id}",
                                       op.named_buffers())


class QcCell:
    """Single-input searched cell with a fixed residual path."""

    def __init__(self, kind: str, m: int, cin: int, c: int, *, rng, dtype):
        if kind == "NonScaling" and cin != c:
            raise ValueError(
                f"NonScaling cell needs cin == working channels ({cin} != {c})")
        self.kind = kind
        self.m = m
        self.c = c
        self.cin = cin
        self.topology = topology_for(kind, m)
        self.prep = Preproc(cin, c, 1, rng=rng, dtype=dtype)
        self.edge_ops = _mixed_edge_ops(self.topology.edges, c, rng, dtype)
        if kind == "Contracting":
            self.res_conv = nn.Conv2d(cin, c, 1, stride=2, padding=0,
                                      rng=rng, dtype=dtype)
            self.res_bn = nn.BatchNorm2d(c, dtype=dtype)
        else:
            self.res_conv = None
            self.res_bn = None

    def residual(self, x: Tensor) -> Tensor:
        if self.res_conv is None:
            return x
        return self.res_bn(self.res_conv(x))

    def forward(self, x: Tensor, alphas: list[Tensor]) -> Tensor:
        values = {0: self.prep(x)}
        _run_dag(values, self.topology.edges, self.edge_ops, alphas,
                 list(range(1, self.m + 1)))
        body = values[1]
        for j in range(2, self.m + 1):
            body = body + values[j]
        return body + self.residual(x)

    def named_params(self):
        yield from nn.prefixed("prep", self.prep.named_params())
        if self.res_conv is not None:
            yield from nn.prefixed("res.conv", self.res_conv.named_params())
            yield from nn.prefixed("res.bn", self.res_bn.named_params())
        for e_idx, e in enumerate(self.topology.edges):
            for op in self.edge_ops[e_idx]:
                yield from nn.prefixed(f"e{e.src}-{e.dst}.{op.op_id}",
                                       op.named_params())

    def named_buffers(self):
        yield from nn.prefixed("prep", self.prep.named_buffers())
        if self.res_bn is not None:
            yield from nn.prefixed("res.bn", self.res_bn.named_buffers())
        for e_idx, e in enumerate(self.topology.edges):
            for op in self.edge_ops[e_idx]:
                yield from nn.prefixed(f"e{e.src}-{e.dst}.{op.op_id}",
                                       op.named_buffers())
