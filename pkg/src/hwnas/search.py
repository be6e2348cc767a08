"""Joint architecture search: loss assembly, data splits, augmentation and
the two-phase alternating training loop.

Epochs 1..warmup train network weights only (architecture logits frozen at
their uniform initialization). The remaining epochs alternate per batch:
a weight step on a seg-train batch, then an architecture step on a seg-eval
batch with every weight frozen, then a QC-weight-only step on that same
batch with the segmentation outputs detached. The QC net thereby trains on
all training patients while the segmentation net never trains on its own
evaluation split.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import affine_transform

from . import nn
from . import tensor as T
from .cells import ArchParams
from .latency import LatencyLUT, LatencyPlan
from .optim import SGD, Adam
from .qc import QcSupernet
from .seg import SegSupernet, dice_batch
from .synthdata import DatasetManifest, SynthDataset
from .tensor import Tensor


@dataclass
class SearchConfig:
    lambda1: float = 1.0
    lambda2: float = 0.001  # weight per millisecond of estimated latency
    epochs: int = 80
    warmup_epochs: int = 40
    m: int = 3
    depth: int = 3
    seg_filters: int = 4
    qc_filters: int = 8
    qc_pairs: int = 3
    seeds: tuple = (0, 1, 2, 3, 4)
    batch_size: int = 16
    lr_weights: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_alpha: float = 3e-3
    tau: float = 1.0
    tau_anneal: bool = False  # linear 5 -> 1 over the alternating phase
    height: int = 32
    width: int = 32
    aug_translate: bool = True
    aug_rotate: bool = True
    aug_scale: bool = True
    dtype: str = "float32"
    alternation: str = "batch"
    retrain_epochs: int = 30
    retrain_lr: float = 0.05

    def validate(self) -> "SearchConfig":
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs must not exceed epochs")
        if self.lambda2 < 0:
            raise ValueError("lambda2 must be >= 0")
        if self.alternation != "batch":
            raise ValueError("only per-batch alternation is implemented")
        return self

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_file(self, path) -> None:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_file(cls, path) -> "SearchConfig":
        kv = {}
        for line in Path(path).read_text().splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            kv[k] = v
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in kv:
                continue
            raw = kv[f.name]
            if f.type in ("int",):
                kwargs[f.name] = int(raw)
            elif f.type in ("float",):
                kwargs[f.name] = float(raw)
            elif f.type in ("bool",):
                kwargs[f.name] = raw in ("True", "true", "1")
            elif f.name == "seeds":
                kwargs[f.name] = tuple(int(x) for x in raw.split(",") if x)
            else:
                kwargs[f.name] = raw
        return cls(**kwargs).validate()


@dataclass
class SplitPlan:
    seg_train: list[int]
    seg_eval: list[int]
    test: list[int]

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "SplitPlan":
        by = {"seg_train": [], "seg_eval": [], "test": []}
        for pid, name in sorted(manifest.split.items()):
            by[name].append(pid)
        plan = cls(**by)
        plan.validate()
        return plan

    @property
    def train(self) -> list[int]:
        return self.seg_train + self.seg_eval

    def validate(self) -> None:
        a, b, c = map(set, (self.seg_train, self.seg_eval, self.test))
        if a & b or a & c or b & c:
            raise ValueError("split plan has overlapping patient ids")
        if not a or not b or not c:
            raise ValueError("split plan has an empty split")


def total_loss(ce, mse, lat, cfg: SearchConfig) -> Tensor:
    """ce + lambda1*mse + lambda2*lat; lat is in milliseconds. With
    lambda2 == 0 the latency term is omitted outright, so no gradient path
    to the architecture logits exists through it."""
    ce = ce if isinstance(ce, Tensor) else Tensor(float(ce))
    mse = mse if isinstance(mse, Tensor) else Tensor(float(mse))
    loss = ce + T.mul_scalar(mse, cfg.lambda1)
    if cfg.lambda2 != 0.0:
        lat = lat if isinstance(lat, Tensor) else Tensor(float(lat))
        loss = loss + T.mul_scalar(lat, cfg.lambda2)
    return loss


def augment(image: np.ndarray, mask: np.ndarray, translate: bool, rotate: bool,
            scale: bool, rng: np.random.Generator):
    """One shared random affine (translation <=10%, rotation <=15 deg,
    scale 0.9..1.1) applied to image (bilinear) and mask (nearest)."""
    if not (translate or rotate or scale):
        return image.copy(), mask.copy()
    h, w = mask.shape
    theta = math.radians(rng.uniform(-15, 15)) if rotate else 0.0
    s = rng.uniform(0.9, 1.1) if scale else 1.0
    ty = rng.uniform(-0.1, 0.1) * h if translate else 0.0
    tx = rng.uniform(-0.1, 0.1) * w if translate else 0.0
    c, si = math.cos(theta), math.sin(theta)
    fwd = s * np.array([[c, -si], [si, c]])
    inv = np.linalg.inv(fwd)
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - inv @ (center + np.array([ty, tx]))
    out_img = np.stack([
        affine_transform(ch, inv, offset=offset, order=1, mode="nearest")
        for ch in image])
    out_mask = affine_transform(mask, inv, offset=offset, order=0,
                                mode="constant", cval=0)
    return out_img, out_mask.astype(mask.dtype)


class SearchAbort(RuntimeError):
    pass


@dataclass
class EpochStats:
    epoch: int
    phase: str
    ce: float
    mse: float
    lat_ms: float
    loss: float
    alpha_entropy: float


HISTORY_HEADER = "epoch,phase,ce,mse,lat_ms,loss,alpha_entropy"


def save_history(history: list[EpochStats], path) -> None:
    lines = [HISTORY_HEADER]
    for h in history:
        lines.append(f"{h.epoch},{h.phase},{h.ce!r},{h.mse!r},{h.lat_ms!r},"
                     f"{h.loss!r},{h.alpha_entropy!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_history(path) -> list[EpochStats]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != HISTORY_HEADER:
        raise ValueError(f"{path}: not a history file")
    out = []
    for line in lines[1:]:
        if not line.strip():
            continue
        e, phase, ce, mse, lat, loss, ent = line.split(",")
        out.append(EpochStats(int(e), phase, float(ce), float(mse), float(lat),
                              float(loss), float(ent)))
    return out


@dataclass
class SearchResult:
    alphas: ArchParams
    history: list[EpochStats]
    seg: SegSupernet
    qc: QcSupernet
    plan: LatencyPlan


def _frames_of(dataset: SynthDataset, pids: list[int]):
    return [s for pid in pids for s in dataset.samples[pid]]


def _batches(frames, batch_size: int, rng: np.random.Generator,
             drop_last: bool = True):
    idx = rng.permutation(len(frames))
    out = []
    for i in range(0, len(idx), batch_size):
        chunk = idx[i:i + batch_size]
        if drop_last and len(chunk) < batch_size:
            break
        out.append([frames[j] for j in chunk])
    return out


def _assemble(batch, cfg: SearchConfig, aug_rng: Optional[np.random.Generator]):
    dt = cfg.np_dtype()
    images = []
    masks = []
    for s in batch:
        img, msk = s.image, s.mask
        if aug_rng is not None:
            img, msk = augment(img, msk, cfg.aug_translate, cfg.aug_rotate,
                               cfg.aug_scale, aug_rng)
        images.append(img.astype(dt))
        masks.append(msk.astype(np.int64))
    return Tensor(np.stack(images)), np.stack(masks)


def _freeze(tensors, frozen: bool):
    for t in tensors:
        t.requires_grad = not frozen


def _one_hot_mask(mask: np.ndarray, dt) -> np.ndarray:
    return np.stack([1.0 - mask, mask.astype(np.float64)], axis=1).astype(dt)


def _check_finite(epoch, step, **terms):
    for name, value in terms.items():
        if value is not None and not np.isfinite(value):
            raise SearchAbort(
                f"non-finite loss at epoch {epoch} step {step}: "
                f"{name}={value} ({terms})")


def search(cfg: SearchConfig, splits: SplitPlan, dataset: SynthDataset,
           lut: LatencyLUT, seed: int) -> SearchResult:
    cfg.validate()
    splits.validate()
    dt = cfg.np_dtype()
    ss = np.random.SeedSequence(seed)
    rng_init_seg, rng_init_qc, rng_shuffle, rng_aug, rng_gumbel = \
        [np.random.default_rng(s) for s in ss.spawn(5)]

    seg = SegSupernet(depth=cfg.depth, m=cfg.m, filters=cfg.seg_filters,
                      rng=rng_init_seg, dtype=dt)
    qc = QcSupernet(pairs=cfg.qc_pairs, m=cfg.m, filters=cfg.qc_filters,
                    rng=rng_init_qc, dtype=dt)
    alphas = ArchParams(seg.topologies() + qc.topologies(), dtype=dt)
    plan = LatencyPlan.from_nets(seg, qc, n=1, h=cfg.height, w=cfg.width)
    plan.check_coverage(lut)

    seg_params = seg.parameters()
    qc_params = qc.parameters()
    opt_seg = SGD(seg_params, lr=cfg.lr_weights, momentum=cfg.momentum,
                  weight_decay=cfg.weight_decay)
    opt_qc = SGD(qc_params, lr=cfg.lr_weights, momentum=cfg.momentum,
                 weight_decay=cfg.weight_decay)
    opt_alpha = Adam(alphas.tensors(), lr=cfg.lr_alpha)

    train_frames = _frames_of(dataset, splits.seg_train)
    eval_frames = _frames_of(dataset, splits.seg_eval)

    def zero_all():
        for p in seg_params + qc_params + alphas.tensors():
            p.grad = None

    def seg_qc_forward(images_t, masks):
        logits, unc, pred_mask = seg.forward(images_t, alphas)
        probs = T.softmax(logits, axis=1)
        qpred = qc.predict(images_t, probs, unc, alphas)
        dice_t = dice_batch(pred_mask, masks)
        ce = T.cross_entropy_2d(logits, masks)
        mse_v = T.mse(qpred, dice_t.astype(dt))
        return ce, mse_v, dice_t, logits, unc, pred_mask

    def tau_at(epoch: int) -> float:
        if not cfg.tau_anneal:
            return cfg.tau
        alt = max(cfg.epochs - cfg.warmup_epochs, 1)
        frac = min(max(epoch - cfg.warmup_epochs, 0) / alt, 1.0)
        return 5.0 + (1.0 - 5.0) * frac

    history: list[EpochStats] = []
    for epoch in range(1, cfg.epochs + 1):
        warmup = epoch <= cfg.warmup_epochs
        tau = tau_at(epoch)
        tb = _batches(train_frames, cfg.batch_size, rng_shuffle)
        eb = _batches(eval_frames, cfg.batch_size, rng_shuffle)
        ces, mses, lats = [], [], []

        for step, (train_b, eval_b) in enumerate(zip(tb, eb)):
            # (a) weight step on a seg-train batch; alpha frozen
            images_t, masks = _assemble(train_b, cfg, rng_aug)
            _freeze(alphas.tensors(), True)
            with nn.mode(training=True, update_stats=True):
                ce, mse_v, dice_t, *_ = seg_qc_forward(images_t, masks)
                loss = ce + T.mul_scalar(mse_v, cfg.lambda1)
            _check_finite(epoch, step, ce=ce.item(), mse=mse_v.item())
            loss.backward()
            opt_seg.step()
            opt_qc.step()
            zero_all()
            _freeze(alphas.tensors(), False)
            ces.append(ce.item())
            mses.append(mse_v.item())

            if warmup:
                # QC-only pass over the eval batch (seg frozen, hard mask)
                images_e, masks_e = _assemble(eval_b, cfg, None)
                with nn.mode(training=True, update_stats=False), T.no_grad():
                    logits, unc, pred_mask = seg.forward(images_e, alphas)
                dice_e = dice_batch(pred_mask, masks_e)
                with nn.mode(training=True, update_stats=True):
                    qpred = qc.predict(images_e, Tensor(_one_hot_mask(pred_mask, dt)),
                                       Tensor(unc.data.copy()), alphas)
                    qloss = T.mul_scalar(T.mse(qpred, dice_e.astype(dt)),
                                         cfg.lambda1)
                _check_finite(epoch, step, qc_mse=qloss.item())
                qloss.backward()
                opt_qc.step()
                zero_all()
                with T.no_grad():
                    lats.append(plan.estimate(alphas, lut, tau, rng_gumbel).item())
                continue

            # (b) alpha step on a seg-eval batch; all weights frozen
            images_e, masks_e = _assemble(eval_b, cfg, None)
            _freeze(seg_params + qc_params, True)
            with nn.mode(training=True, update_stats=False):
                ce_e, mse_e, dice_e, logits_e, unc_e, pred_mask_e = \
                    seg_qc_forward(images_e, masks_e)
                if cfg.lambda2 != 0.0:
                    lat_e = plan.estimate(alphas, lut, tau, rng_gumbel)
                else:
                    with T.no_grad():
                        lat_e = plan.estimate(alphas, lut, tau, rng_gumbel)
                aloss = total_loss(ce_e, mse_e, lat_e, cfg)
            _check_finite(epoch, step, ce=ce_e.item(), mse=mse_e.item(),
                          lat_ms=lat_e.item())
            aloss.backward()
            opt_alpha.step()
            zero_all()
            _freeze(seg_params + qc_params, False)
            lats.append(lat_e.item())

            # (c) QC weight step on the same eval batch, seg detached
            with nn.mode(training=True, update_stats=True):
                qpred = qc.predict(images_e, Tensor(_one_hot_mask(pred_mask_e, dt)),
                                   Tensor(unc_e.data.copy()), alphas)
                qloss = T.mul_scalar(T.mse(qpred, dice_e.astype(dt)), cfg.lambda1)
            _check_finite(epoch, step, qc_mse=qloss.item())
            qloss.backward()
            opt_qc.step()
            zero_all()

        lat_mean = float(np.mean(lats)) if lats else 0.0
        ce_mean = float(np.mean(ces))
        mse_mean = float(np.mean(mses))
        history.append(EpochStats(
            epoch=epoch, phase="warmup" if warmup else "search", ce=ce_mean,
            mse=mse_mean, lat_ms=lat_mean,
            loss=ce_mean + cfg.lambda1 * mse_mean + cfg.lambda2 * lat_mean,
            alpha_entropy=alphas.entropy()))
    return SearchResult(alphas=alphas, history=history, seg=seg, qc=qc,
                        plan=plan)


def run_seeds(cfg: SearchConfig, dataset: SynthDataset, lut: LatencyLUT):
    """Full search + derive + retrain once per seed; returns the per-seed
    records and the index of the best by (validation Dice - MAE)."""
    from .genotype import build_pipeline, derive, retrain

    splits = SplitPlan.from_manifest(dataset.manifest)
    records = []
    for seed in cfg.seeds:
        result = search(cfg, splits, dataset, lut, seed)
        genotype = derive(result.alphas, cfg)
        pipeline = build_pipeline(genotype, rng=np.random.default_rng(seed),
                                  dtype=cfg.np_dtype())
        metrics = retrain(pipeline, dataset, cfg, seed=seed)
        records.append({"seed": seed, "result": result, "genotype": genotype,
                        "pipeline": pipeline, "metrics": metrics,
                        "objective": metrics["val_dice"] - metrics["val_mae"]})
    best = select_best(records)
    return records, best


def select_best(records) -> int:
    """Deterministic argmax of the composite objective (ties: first)."""
    objectives = [r["objective"] for r in records]
    return int(np.argmax(objectives))
