"""Discrete architectures: derivation from the logits, concrete networks,
retraining, accounting and reporting.

derive() keeps the argmax candidate on every searched edge (ties resolve to
the lowest candidate index). build_pipeline() instantiates concrete networks
with the same skeleton and parameter names as the supernets but a single
operation per edge; zero-op edges are removed outright, which is what makes
the derived network cheaper in both FLOPs and measured latency.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import nn
from . import tensor as T
from .cells import ArchParams, Preproc, topology_for
from .ops import OpInstance
from .qc import QcSupernet
from .seg import SegSupernet, dice_batch, seg_layout
from .tensor import Tensor

GENOTYPE_MAGIC = "hwnas-genotype v1"

KIND_ORDER = ("DownCell", "UpCell", "Contracting", "NonScaling")


@dataclass
class Genotype:
    depth: int
    m: int
    seg_filters: int
    qc_filters: int
    qc_pairs: int
    edges: dict[str, list[tuple[int, int, str]]] = field(default_factory=dict)

    def chosen(self) -> dict[tuple[str, int], str]:
        """(kind, edge_idx) -> op id, matching the supernets' latency plans."""
        out = {}
        for kind, lst in self.edges.items():
            for e_idx, (_, _, op_id) in enumerate(lst):
                out[(kind, e_idx)] = op_id
        return out

    def save(self, path) -> None:
        lines = [f"# {GENOTYPE_MAGIC}",
                 f"depth={self.depth}", f"m={self.m}",
                 f"seg_filters={self.seg_filters}",
                 f"qc_filters={self.qc_filters}",
                 f"qc_pairs={self.qc_pairs}"]
        for kind in KIND_ORDER:
            for src, dst, op_id in self.edges[kind]:
                lines.append(f"edge {kind} {src} {dst} {op_id}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "Genotype":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"genotype file not found: {path}")
        lines = path.read_text().splitlines()
        if not lines or lines[0] != f"# {GENOTYPE_MAGIC}":
            raise ValueError(f"{path}: not a '{GENOTYPE_MAGIC}' file")
        kv = {}
        edges: dict[str, list] = {k: [] for k in KIND_ORDER}
        for line in lines[1:]:
            if not line.strip():
                continue
            if line.startswith("edge "):
                _, kind, src, dst, op_id = line.split(" ")
                edges[kind].append((int(src), int(dst), op_id))
            else:
                k, _, v = line.partition("=")
                kv[k] = int(v)
        g = cls(depth=kv["depth"], m=kv["m"], seg_filters=kv["seg_filters"],
                qc_filters=kv["qc_filters"], qc_pairs=kv["qc_pairs"],
                edges=edges)
        g.validate()
        return g

    def validate(self) -> None:
        for kind in KIND_ORDER:
            topo = topology_for(kind, self.m)
            lst = self.edges.get(kind, [])
            if len(lst) != len(topo.edges):
                raise ValueError(
                    f"{kind}: {len(lst)} edges in genotype, expected "
                    f"{len(topo.edges)}")
            for (src, dst, op_id), e in zip(lst, topo.edges):
                if (src, dst) != (e.src, e.dst):
                    raise ValueError(f"{kind}: edge ({src},{dst}) out of order")
                if op_id not in e.candidates:
                    raise ValueError(
                        f"{kind} edge ({src},{dst}): {op_id!r} is not in the "
                        f"{e.set_name} candidate set")


def derive(alphas: ArchParams, cfg, top2_per_node: bool = False) -> Genotype:
    """Argmax operation per edge; ties break to the lowest candidate index.

    With top2_per_node, inter-node Normal edges beyond the two strongest
    incoming per target are forced to the zero op (scaling input edges are
    always kept: their candidate sets have no zero)."""
    edges: dict[str, list[tuple[int, int, str]]] = {}
    for kind in KIND_ORDER:
        topo = alphas.topologies[kind]
        table = alphas.tables[kind]
        rows = []
        strength = []
        for e, a in zip(topo.edges, table):
            z = a.data - a.data.max()
            p = np.exp(z) / np.exp(z).sum()
            k = int(np.argmax(a.data))
            rows.append((e.src, e.dst, e.candidates[k]))
            strength.append(float(p.max()))
        if top2_per_node:
            by_dst: dict[int, list[int]] = {}
            for idx, e in enumerate(topo.edges):
                if e.set_name == "Normal" and "zero" in e.candidates:
                    by_dst.setdefault(e.dst, []).append(idx)
            for dst, idxs in by_dst.items():
                keep = sorted(idxs, key=lambda i: -strength[i])[:2]
                for i in idxs:
                    if i not in keep:
                        rows[i] = (rows[i][0], rows[i][1], "zero")
        edges[kind] = rows
    return Genotype(depth=cfg.depth, m=cfg.m, seg_filters=cfg.seg_filters,
                    qc_filters=cfg.qc_filters, qc_pairs=cfg.qc_pairs,
                    edges=edges)


# -- concrete cells ---------------------------------------------------------


class DerivedSegCell:
    def __init__(self, kind: str, m: int, cin_a: int, cin_b: int, c: int,
                 stride_a: int, stride_b: int,
                 choices: list[tuple[int, int, str]], *, rng, dtype):
        self.kind = kind
        self.m = m
        self.c = c
        self.prep_a = Preproc(cin_a, c, stride_a, rng=rng, dtype=dtype)
        self.prep_b = Preproc(cin_b, c, stride_b, rng=rng, dtype=dtype)
        self.edges = [(src, dst, op_id,
                       None if op_id == "zero"
                       else OpInstance(op_id, c, c, rng=rng, dtype=dtype))
                      for src, dst, op_id in choices]

    def forward(self, xa: Tensor, xb: Tensor) -> Tensor:
        values: dict[int, Optional[Tensor]] = {0: self.prep_a(xa),
                                               1: self.prep_b(xb)}
        scale = 0.5 if self.kind == "DownCell" else 2.0
        b, c, h, w = values[0].data.shape
        mid_shape = (b, c, int(h * scale), int(w * scale))
        for j in list(range(2, self.m + 2)) + [self.m + 2]:
            acc = None
            for src, dst, op_id, op in self.edges:
                if dst != j or op is None:
                    continue
                v = values[src]
                term = op(v) if v is not None else None
                if term is not None:
                    acc = term if acc is None else acc + term
            values[j] = acc
        out = values[self.m + 2]
        if out is None:  # every output edge chose zero
            out = Tensor(np.zeros(mid_shape, dtype=values[0].dtype))
        return out

    def named_params(self):
        yield from nn.prefixed("prep_a", self.prep_a.named_params())
        yield from nn.prefixed("prep_b", self.prep_b.named_params())
        for src, dst, op_id, op in self.edges:
            if op is not None:
                yield from nn.prefixed(f"e{src}-{dst}.{op_id}", op.named_params())

    def named_buffers(self):
        yield from nn.prefixed("prep_a", self.prep_a.named_buffers())
        yield from nn.prefixed("prep_b", self.prep_b.named_buffers())
        for src, dst, op_id, op in self.edges:
            if op is not None:
                yield from nn.prefixed(f"e{src}-{dst}.{op_id}", op.named_buffers())


class DerivedQcCell:
    def __init__(self, kind: str, m: int, cin: int, c: int,
                 choices: list[tuple[int, int, str]], *, rng, dtype):
        self.kind = kind
        self.m = m
        self.c = c
        self.cin = cin
        self.prep = Preproc(cin, c, 1, rng=rng, dtype=dtype)
        self.edges = [(src, dst, op_id,
                       None if op_id == "zero"
                       else OpInstance(op_id, c, c, rng=rng, dtype=dtype))
                      for src, dst, op_id in choices]
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

    def forward(self, x: Tensor) -> Tensor:
        values: dict[int, Optional[Tensor]] = {0: self.prep(x)}
        for j in range(1, self.m + 1):
            acc = None
            for src, dst, op_id, op in self.edges:
                if dst != j or op is None:
                    continue
                v = values[src]
                term = op(v) if v is not None else None
                if term is not None:
                    acc = term if acc is None else acc + term
            values[j] = acc
        body = None
        for j in range(1, self.m + 1):
            if values[j] is not None:
                body = values[j] if body is None else body + values[j]
        res = self.residual(x)
        return res if body is None else body + res

    def named_params(self):
        yield from nn.prefixed("prep", self.prep.named_params())
        if self.res_conv is not None:
            yield from nn.prefixed("res.conv", self.res_conv.named_params())
            yield from nn.prefixed("res.bn", self.res_bn.named_params())
        for src, dst, op_id, op in self.edges:
            if op is not None:
                yield from nn.prefixed(f"e{src}-{dst}.{op_id}", op.named_params())

    def named_buffers(self):
        yield from nn.prefixed("prep", self.prep.named_buffers())
        if self.res_bn is not None:
            yield from nn.prefixed("res.bn", self.res_bn.named_buffers())
        for src, dst, op_id, op in self.edges:
            if op is not None:
                yield from nn.prefixed(f"e{src}-{dst}.{op_id}", op.named_buffers())


# -- concrete networks --------------------------------------------------------


class DerivedSegNet:
    def __init__(self, genotype: Genotype, in_channels: int = 3, *, rng,
                 dtype=np.float32):
        g = genotype
        self.depth = g.depth
        self.filters = g.seg_filters
        self.in_channels = in_channels
        self.stem_conv = nn.Conv2d(in_channels, g.seg_filters, 3, padding=1,
                                   rng=rng, dtype=dtype)
        self.stem_bn = nn.BatchNorm2d(g.seg_filters, dtype=dtype)
        self.plan, self._chan, self._level = seg_layout(g.depth, g.seg_filters)
        self.cells: dict[str, DerivedSegCell] = {}
        for name, kind, src_a, src_b, level_in in self.plan:
            c = self._chan(name)
            self.cells[name] = DerivedSegCell(
                kind, g.m, self._chan(src_a), self._chan(src_b), c,
                stride_a=2 ** (level_in - self._level(src_a)),
                stride_b=2 ** (level_in - self._level(src_b)),
                choices=g.edges[kind], rng=rng, dtype=dtype)
        self.head = nn.Conv2d(g.seg_filters, 2, 1, padding=0, rng=rng,
                              dtype=dtype)

    def forward(self, image: Tensor):
        h, w = image.data.shape[2], image.data.shape[3]
        div = 2 ** self.depth
        if h % div or w % div:
            raise ValueError(
                f"input spatial dims {h}x{w} must be divisible by 2^depth = {div}")
        outs = {"stem": self.stem_bn(self.stem_conv(image))}
        for name, kind, src_a, src_b, _ in self.plan:
            outs[name] = self.cells[name].forward(outs[src_a], outs[src_b])
        logits = self.head(outs[f"up{self.depth}"])
        uncertainty = T.softmax_entropy(logits, axis=1)
        mask = np.argmax(logits.data, axis=1)
        return logits, uncertainty, mask

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

    def flops(self, h: int, w: int) -> int:
        total = self.stem_conv.flops(h, w)
        for name, kind, src_a, src_b, level_in in self.plan:
            cell = self.cells[name]
            total += cell.prep_a.flops(h >> self._level(src_a),
                                       w >> self._level(src_a))
            total += cell.prep_b.flops(h >> self._level(src_b),
                                       w >> self._level(src_b))
            mid = self._level(name)
            for src, dst, op_id, op in cell.edges:
                if op is None:
                    continue
                lvl = level_in if src in (0, 1) else mid
                total += op.flops(h >> lvl, w >> lvl)
        total += self.head.flops(h, w)
        return total


class DerivedQcNet:
    def __init__(self, genotype: Genotype, in_channels: int = 6, *, rng,
                 dtype=np.float32):
        g = genotype
        self.pairs = g.qc_pairs
        self.in_channels = in_channels
        self.stem_conv = nn.Conv2d(in_channels, g.qc_filters, 3, padding=1,
                                   rng=rng, dtype=dtype)
        self.stem_bn = nn.BatchNorm2d(g.qc_filters, dtype=dtype)
        self.cells: list[DerivedQcCell] = []
        cin = g.qc_filters
        for _ in range(g.qc_pairs):
            c = 2 * cin
            self.cells.append(DerivedQcCell("Contracting", g.m, cin, c,
                                            g.edges["Contracting"], rng=rng,
                                            dtype=dtype))
            self.cells.append(DerivedQcCell("NonScaling", g.m, c, c,
                                            g.edges["NonScaling"], rng=rng,
                                            dtype=dtype))
            cin = c
        self.out_channels = cin
        self.head = nn.Linear(cin, 1, rng=rng, dtype=dtype, zero_init=True)

    def predict(self, image: Tensor, mask2: Tensor, uncertainty: Tensor) -> Tensor:
        x = T.concat([image, mask2, uncertainty], axis=1)
        h = self.stem_bn(self.stem_conv(x))
        for cell in self.cells:
            h = cell.forward(h)
        return T.sigmoid(self.head(T.global_avg_pool(h)).reshape(-1))

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

    def flops(self, h: int, w: int) -> int:
        total = self.stem_conv.flops(h, w)
        lvl = 0
        for cell in self.cells:
            ch, cw = h >> lvl, w >> lvl
            total += cell.prep.flops(ch, cw)
            if cell.res_conv is not None:
                total += cell.res_conv.flops(ch, cw)
            mid = lvl + (1 if cell.kind == "Contracting" else 0)
            for src, dst, op_id, op in cell.edges:
                if op is None:
                    continue
                eh = (ch, cw) if src == 0 else (h >> mid, w >> mid)
                total += op.flops(*eh)
            lvl = mid
        return total + self.head.flops()


class DerivedPipeline:
    """Concrete segmentation + QC pair built from one genotype."""

    def __init__(self, genotype: Genotype, *, rng, dtype=np.float32):
        self.genotype = genotype
        self.dtype = dtype
        self.seg = DerivedSegNet(genotype, rng=rng, dtype=dtype)
        self.qc = DerivedQcNet(genotype, rng=rng, dtype=dtype)

    def seg_forward(self, images: Tensor):
        return self.seg.forward(images)

    def qc_predict(self, images: Tensor, mask2: Tensor, unc: Tensor) -> Tensor:
        return self.qc.predict(images, mask2, unc)

    def seg_params(self):
        return self.seg.parameters()

    def qc_params(self):
        return self.qc.parameters()

    def infer(self, images: np.ndarray):
        """Deployment-style forward: hard mask fed one-hot into QC."""
        with nn.mode(training=False), T.no_grad():
            x = Tensor(images.astype(self.dtype))
            logits, unc, mask = self.seg.forward(x)
            onehot = np.stack([1.0 - mask, mask.astype(np.float64)],
                              axis=1).astype(self.dtype)
            score = self.qc.predict(x, Tensor(onehot), unc)
        return mask, score.data, logits.data, unc.data

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for net in (self.seg, self.qc):
            for name, t in net.named_params():
                out[name] = t.data
            for name, arr in net.named_buffers():
                out[name] = arr
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for net in (self.seg, self.qc):
            for name, t in net.named_params():
                t.data = state[name].astype(t.data.dtype).copy()
            for name, arr in net.named_buffers():
                arr[:] = state[name]

    def flops(self, h: int, w: int) -> int:
        return self.seg.flops(h, w) + self.qc.flops(h, w)


def build_pipeline(genotype: Genotype, *, rng, dtype=np.float32) -> DerivedPipeline:
    genotype.validate()
    return DerivedPipeline(genotype, rng=rng, dtype=dtype)


# -- retraining ---------------------------------------------------------------


def retrain_splits(patients: int, seed: int) -> tuple[list[int], list[int]]:
    """60% of the patients train the derived networks, the rest validate."""
    rng = np.random.default_rng([seed, 4242])
    order = rng.permutation(patients)
    n_train = int(round(0.6 * patients))
    return sorted(int(p) for p in order[:n_train]), \
        sorted(int(p) for p in order[n_train:])


def retrain(pipeline, dataset, cfg, seed: int) -> dict:
    """Train the segmentation net with cross entropy, then freeze it and
    train the QC net against the frozen model's live Dice. Returns
    validation metrics plus the constant-predictor MAE baseline."""
    from .optim import SGD
    from .search import SearchAbort, _assemble, _batches, _one_hot_mask

    dt = pipeline.dtype
    ss = np.random.SeedSequence([seed, 77])
    rng_shuffle, rng_aug = [np.random.default_rng(s) for s in ss.spawn(2)]
    train_pids, val_pids = retrain_splits(dataset.manifest.patients, seed)
    train_frames = [s for pid in train_pids for s in dataset.samples[pid]]
    val_frames = [s for pid in val_pids for s in dataset.samples[pid]]

    opt_seg = SGD(pipeline.seg_params(), lr=cfg.retrain_lr,
                  momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    for epoch in range(cfg.retrain_epochs):
        for batch in _batches(train_frames, cfg.batch_size, rng_shuffle):
            images_t, masks = _assemble(batch, cfg, rng_aug)
            with nn.mode(training=True, update_stats=True):
                logits, _, _ = pipeline.seg_forward(images_t)
                loss = T.cross_entropy_2d(logits, masks)
            if not np.isfinite(loss.item()):
                raise SearchAbort(f"retrain seg: non-finite loss at epoch {epoch}")
            loss.backward()
            opt_seg.step()
            opt_seg.zero_grad()

    for p in pipeline.seg_params():
        p.requires_grad = False
    opt_qc = SGD(pipeline.qc_params(), lr=cfg.retrain_lr,
                 momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    qc_epochs = max(int(round(cfg.retrain_epochs * 1.5)), 1)
    for epoch in range(qc_epochs):
        for batch in _batches(train_frames, cfg.batch_size, rng_shuffle):
            images_t, masks = _assemble(batch, cfg, None)
            with nn.mode(training=False), T.no_grad():
                logits, unc, pred_mask = pipeline.seg_forward(images_t)
            targets = dice_batch(pred_mask, masks).astype(dt)
            with nn.mode(training=True, update_stats=True):
                qpred = pipeline.qc_predict(
                    images_t, Tensor(_one_hot_mask(pred_mask, dt)),
                    Tensor(unc.data.copy()))
                loss = T.mse(qpred, targets)
            if not np.isfinite(loss.item()):
                raise SearchAbort(f"retrain qc: non-finite loss at epoch {epoch}")
            loss.backward()
            opt_qc.step()
            opt_qc.zero_grad()
    for p in pipeline.seg_params():
        p.requires_grad = True

    return evaluate(pipeline, val_frames) | {
        "train_patients": len(train_pids), "val_patients": len(val_pids)}


def evaluate(pipeline, frames, batch_size: int = 32) -> dict:
    """Validation Dice / Dice-prediction MAE, plus the mean-predictor MAE."""
    dices = []
    preds = []
    for i in range(0, len(frames), batch_size):
        chunk = frames[i:i + batch_size]
        images = np.stack([s.image for s in chunk])
        masks = np.stack([s.mask for s in chunk])
        mask_hat, score, _, _ = pipeline.infer(images)
        dices.extend(dice_batch(mask_hat, masks))
        preds.extend(score)
    dices = np.array(dices)
    preds = np.array(preds)
    const = np.abs(dices - dices.mean()).mean()
    return {
        "val_dice": float(dices.mean()),
        "val_dice_std": float(dices.std()),
        "val_mae": float(np.abs(preds - dices).mean()),
        "const_mae": float(const),
        "n_frames": len(frames),
    }


# -- handcrafted baseline -------------------------------------------------------


class _DoubleConv:
    def __init__(self, cin, cout, *, rng, dtype):
        self.c1 = nn.Conv2d(cin, cout, 3, padding=1, rng=rng, dtype=dtype)
        self.b1 = nn.BatchNorm2d(cout, dtype=dtype)
        self.c2 = nn.Conv2d(cout, cout, 3, padding=1, rng=rng, dtype=dtype)
        self.b2 = nn.BatchNorm2d(cout, dtype=dtype)

    def __call__(self, x):
        h = T.relu(self.b1(self.c1(x)))
        return T.relu(self.b2(self.c2(h)))

    def named_params(self):
        for tag, layer in (("c1", self.c1), ("b1", self.b1),
                           ("c2", self.c2), ("b2", self.b2)):
            yield from nn.prefixed(tag, layer.named_params())

    def named_buffers(self):
        for tag, layer in (("b1", self.b1), ("b2", self.b2)):
            yield from nn.prefixed(tag, layer.named_buffers())

    def flops(self, h, w):
        return (self.c1.flops(h, w) + self.c2.flops(h, w))


class UNetBaseline:
    """Plain two-level U-net with the given initial filter count."""

    def __init__(self, filters: int = 8, in_channels: int = 3, *, rng,
                 dtype=np.float32):
        f = filters
        self.filters = f
        self.enc1 = _DoubleConv(in_channels, f, rng=rng, dtype=dtype)
        self.enc2 = _DoubleConv(f, 2 * f, rng=rng, dtype=dtype)
        self.mid = _DoubleConv(2 * f, 4 * f, rng=rng, dtype=dtype)
        self.up2 = nn.ConvTranspose2d(4 * f, 2 * f, rng=rng, dtype=dtype)
        self.dec2 = _DoubleConv(4 * f, 2 * f, rng=rng, dtype=dtype)
        self.up1 = nn.ConvTranspose2d(2 * f, f, rng=rng, dtype=dtype)
        self.dec1 = _DoubleConv(2 * f, f, rng=rng, dtype=dtype)
        self.head = nn.Conv2d(f, 2, 1, padding=0, rng=rng, dtype=dtype)

    def forward(self, image: Tensor):
        from . import conv as C
        e1 = self.enc1(image)
        e2 = self.enc2(C.pool2d(e1, "max"))
        m = self.mid(C.pool2d(e2, "max"))
        d2 = self.dec2(T.concat([self.up2(m), e2], axis=1))
        d1 = self.dec1(T.concat([self.up1(d2), e1], axis=1))
        logits = self.head(d1)
        uncertainty = T.softmax_entropy(logits, axis=1)
        return logits, uncertainty, np.argmax(logits.data, axis=1)

    def named_params(self):
        parts = (("enc1", self.enc1), ("enc2", self.enc2), ("mid", self.mid),
                 ("up2", self.up2), ("dec2", self.dec2), ("up1", self.up1),
                 ("dec1", self.dec1), ("head", self.head))
        for tag, part in parts:
            yield from nn.prefixed(f"unet.{tag}", part.named_params())

    def named_buffers(self):
        for tag, part in (("enc1", self.enc1), ("enc2", self.enc2),
                          ("mid", self.mid), ("dec2", self.dec2),
                          ("dec1", self.dec1)):
            yield from nn.prefixed(f"unet.{tag}", part.named_buffers())

    def parameters(self):
        return [t for _, t in self.named_params()]

    def flops(self, h: int, w: int) -> int:
        h2, w2 = h // 2, w // 2
        h4, w4 = h // 4, w // 4
        total = self.enc1.flops(h, w) + 9 * h2 * w2 * self.filters
        total += self.enc2.flops(h2, w2) + 9 * h4 * w4 * 2 * self.filters
        total += self.mid.flops(h4, w4)
        total += self.up2.flops(h4, w4) + self.dec2.flops(h2, w2)
        total += self.up1.flops(h2, w2) + self.dec1.flops(h, w)
        return total + self.head.flops(h, w)


class ResidualRegressor:
    """Small residual CNN regressing a scalar in (0, 1) from 6 channels."""

    def __init__(self, filters: int = 8, in_channels: int = 6, *, rng,
                 dtype=np.float32):
        self.stem = nn.Conv2d(in_channels, filters, 3, padding=1, rng=rng,
                              dtype=dtype)
        self.stem_bn = nn.BatchNorm2d(filters, dtype=dtype)
        self.blocks = []
        c = filters
        for _ in range(3):
            blk = {
                "conv1": nn.Conv2d(c, 2 * c, 3, stride=2, padding=1, rng=rng,
                                   dtype=dtype),
                "bn1": nn.BatchNorm2d(2 * c, dtype=dtype),
                "conv2": nn.Conv2d(2 * c, 2 * c, 3, padding=1, rng=rng,
                                   dtype=dtype),
                "bn2": nn.BatchNorm2d(2 * c, dtype=dtype),
                "proj": nn.Conv2d(c, 2 * c, 1, stride=2, padding=0, rng=rng,
                                  dtype=dtype),
                "bnp": nn.BatchNorm2d(2 * c, dtype=dtype),
            }
            self.blocks.append(blk)
            c = 2 * c
        self.out_channels = c
        self.head = nn.Linear(c, 1, rng=rng, dtype=dtype, zero_init=True)

    def predict(self, image: Tensor, mask2: Tensor, uncertainty: Tensor) -> Tensor:
        x = T.concat([image, mask2, uncertainty], axis=1)
        h = T.relu(self.stem_bn(self.stem(x)))
        for blk in self.blocks:
            body = blk["bn2"](blk["conv2"](T.relu(blk["bn1"](blk["conv1"](h)))))
            h = T.relu(body + blk["bnp"](blk["proj"](h)))
        return T.sigmoid(self.head(T.global_avg_pool(h)).reshape(-1))

    def named_params(self):
        yield from nn.prefixed("qcbase.stem", self.stem.named_params())
        yield from nn.prefixed("qcbase.stem_bn", self.stem_bn.named_params())
        for i, blk in enumerate(self.blocks):
            for tag in ("conv1", "bn1", "conv2", "bn2", "proj", "bnp"):
                yield from nn.prefixed(f"qcbase.b{i}.{tag}",
                                       blk[tag].named_params())
        yield from nn.prefixed("qcbase.head", self.head.named_params())

    def named_buffers(self):
        yield from nn.prefixed("qcbase.stem_bn", self.stem_bn.named_buffers())
        for i, blk in enumerate(self.blocks):
            for tag in ("bn1", "bn2", "bnp"):
                yield from nn.prefixed(f"qcbase.b{i}.{tag}",
                                       blk[tag].named_buffers())

    def parameters(self):
        return [t for _, t in self.named_params()]

    def flops(self, h: int, w: int) -> int:
        total = self.stem.flops(h, w)
        lvl = 0
        for blk in self.blocks:
            ch, cw = h >> lvl, w >> lvl
            total += blk["conv1"].flops(ch, cw) + blk["proj"].flops(ch, cw)
            total += blk["conv2"].flops(ch // 2, cw // 2)
            lvl += 1
        return total + self.head.flops()


class BaselinePipeline:
    """Handcrafted U-net(filters) + residual regressor, same interface as
    DerivedPipeline so retrain/evaluate/report treat them uniformly."""

    def __init__(self, filters: int = 8, *, rng, dtype=np.float32):
        self.dtype = dtype
        self.seg = UNetBaseline(filters, rng=rng, dtype=dtype)
        self.qc = ResidualRegressor(filters, rng=rng, dtype=dtype)

    def seg_forward(self, images: Tensor):
        return self.seg.forward(images)

    def qc_predict(self, images, mask2, unc):
        return self.qc.predict(images, mask2, unc)

    def seg_params(self):
        return self.seg.parameters()

    def qc_params(self):
        return self.qc.parameters()

    def infer(self, images: np.ndarray):
        with nn.mode(training=False), T.no_grad():
            x = Tensor(images.astype(self.dtype))
            logits, unc, mask = self.seg.forward(x)
            onehot = np.stack([1.0 - mask, mask.astype(np.float64)],
                              axis=1).astype(self.dtype)
            score = self.qc.predict(x, Tensor(onehot), unc)
        return mask, score.data, logits.data, unc.data

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for net in (self.seg, self.qc):
            for name, t in net.named_params():
                out[name] = t.data
            for name, arr in net.named_buffers():
                out[name] = arr
        return out

    def load_state(self, state):
        for net in (self.seg, self.qc):
            for name, t in net.named_params():
                t.data = state[name].astype(t.data.dtype).copy()
            for name, arr in net.named_buffers():
                arr[:] = state[name]

    def flops(self, h: int, w: int) -> int:
        return self.seg.flops(h, w) + self.qc.flops(h, w)


# -- reporting ----------------------------------------------------------------


REPORT_COLUMNS = ("method", "dice", "mae", "latency_ms", "flops_m")


def format_report(rows: list[dict], extras: Optional[dict] = None) -> str:
    """Text table (units in the header) plus a machine-readable key=value
    section."""
    lines = ["method                     Dice    MAE     Latency(ms)  FLOPs(M)"]
    for r in rows:
        lines.append(f"{r['method']:<26s} {r['dice']:<7.3f} {r['mae']:<7.3f} "
                     f"{r['latency_ms']:<12.3f} {r['flops_m']:<8.3f}")
    lines.append("---")
    for r in rows:
        for col in REPORT_COLUMNS[1:]:
            lines.append(f"{r['method']}.{col}={r[col]!r}")
    for k, v in (extras or {}).items():
        lines.append(f"{k}={v!r}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict:
    out = {}
    seen_sep = False
    for line in text.splitlines():
        if line.strip() == "---":
            seen_sep = True
            continue
        if seen_sep and "=" in line:
            k, _, v = line.partition("=")
            out[k] = float(v)
    return out
