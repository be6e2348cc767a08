"""Synthetic annulus-segmentation dataset with controllable degradation.

Each patient gets a base ring geometry (an eccentric, rotated elliptical
annulus standing in for myocardium around a cavity); each frame jitters the
geometry and draws a degradation level that drives contrast loss, blur,
speckle noise and image-only occlusion patches. Ground-truth masks always
contain the true ring, so heavier degradation genuinely lowers achievable
segmentation quality, which is what gives the quality-control regressor a
target with variance.

Generation is deterministic per (seed, patient, frame) stream: regenerating
from a manifest reproduces the dataset bit for bit, and removing one patient
never changes another patient's samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .seg import dice

BG_INTENSITY = 0.22
FG_INTENSITY = 0.85

MANIFEST_MAGIC = "hwnas-dataset v1"

SPLIT_NAMES = ("seg_train", "seg_eval", "test")


@dataclass
class SynthSample:
    image: np.ndarray  # (3, H, W) float64 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    patient_id: int
    frame_id: int
    degradation: dict


@dataclass
class DatasetManifest:
    seed: int
    patients: int
    frames_per_patient: int
    height: int
    width: int
    degradation_lo: float
    degradation_hi: float
    split: dict[int, str] = field(default_factory=dict)

    def save(self, path) -> None:
        lines = [f"# {MANIFEST_MAGIC}",
                 f"seed={self.seed}",
                 f"patients={self.patients}",
                 f"frames_per_patient={self.frames_per_patient}",
                 f"height={self.height}",
                 f"width={self.width}",
                 f"degradation_lo={self.degradation_lo!r}",
                 f"degradation_hi={self.degradation_hi!r}"]
        for pid in sorted(self.split):
            lines.append(f"split p{pid:03d} {self.split[pid]}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"dataset manifest not found: {path}")
        lines = path.read_text().splitlines()
        if not lines or lines[0] != f"# {MANIFEST_MAGIC}":
            raise ValueError(f"{path}: not a '{MANIFEST_MAGIC}' file")
        kv = {}
        split = {}
        for line in lines[1:]:
            if not line.strip():
                continue
            if line.startswith("split "):
                _, pid, name = line.split(" ")
                if name not in SPLIT_NAMES:
                    raise ValueError(f"unknown split name {name!r}")
                split[int(pid[1:])] = name
            else:
                k, _, v = line.partition("=")
                kv[k] = v
        return cls(seed=int(kv["seed"]), patients=int(kv["patients"]),
                   frames_per_patient=int(kv["frames_per_patient"]),
                   height=int(kv["height"]), width=int(kv["width"]),
                   degradation_lo=float(kv["degradation_lo"]),
                   degradation_hi=float(kv["degradation_hi"]), split=split)


@dataclass
class SynthDataset:
    manifest: DatasetManifest
    samples: dict[int, list[SynthSample]]

    def split_frames(self, names) -> list[SynthSample]:
        if isinstance(names, str):
            names = (names,)
        out = []
        for pid in sorted(self.samples):
            if self.manifest.split[pid] in names:
                out.extend(self.samples[pid])
        return out

    def all_frames(self) -> list[SynthSample]:
        return [s for pid in sorted(self.samples) for s in self.samples[pid]]


def _ring_alpha(h: int, w: int, cy: float, cx: float, ra: float, rb: float,
                inner: float, phi: float) -> np.ndarray:
    """Anti-aliased elliptical annulus coverage in [0, 1]."""
    yy, xx = np.mgrid[0:h, 0:w]
    y = yy - cy
    x = xx - cx
    xr = np.cos(phi) * x + np.sin(phi) * y
    yr = -np.sin(phi) * x + np.cos(phi) * y
    q = np.sqrt((xr / ra) ** 2 + (yr / rb) ** 2)
    edge = 0.75 / min(ra, rb)  # ~0.75px transition band in q units

    def ramp(t):
        return np.clip(0.5 + t / (2 * edge), 0.0, 1.0)

    return ramp(q - inner) * ramp(1.0 - q)


def _render_frame(h: int, w: int, geo: dict, level: float,
                  rng: np.random.Generator) -> SynthSample:
    alpha = _ring_alpha(h, w, geo["cy"], geo["cx"], geo["ra"], geo["rb"],
                        geo["inner"], geo["phi"])
    mask = (alpha > 0.5).astype(np.uint8)

    contrast = 1.0 - 0.60 * level
    fg_eff = BG_INTENSITY + (FG_INTENSITY - BG_INTENSITY) * contrast
    base = BG_INTENSITY + (fg_eff - BG_INTENSITY) * alpha
    image = np.repeat(base[None], 3, axis=0)

    occlusions = []
    if level > 0.45:
        n_rect = 1 + int(level > 0.75)
        for _ in range(n_rect):
            size = int(round((0.24 + 0.18 * rng.random()) * min(h, w)))
            # center the patch near the ring so it actually hides foreground
            ang = rng.uniform(0, 2 * np.pi)
            ry = geo["cy"] + geo["rb"] * (0.75 + 0.25 * rng.random()) * np.sin(ang)
            rx = geo["cx"] + geo["ra"] * (0.75 + 0.25 * rng.random()) * np.cos(ang)
            y0 = int(np.clip(round(ry - size / 2), 0, h - 1))
            x0 = int(np.clip(round(rx - size / 2), 0, w - 1))
            y1, x1 = min(y0 + size, h), min(x0 + size, w)
            fill = BG_INTENSITY * (0.55 + 0.45 * rng.random())
            image[:, y0:y1, x0:x1] = fill
            occlusions.append((y0, x0, y1, x1, float(fill)))

    blur_sigma = 2.2 * level * (h / 32.0)
    if blur_sigma > 0:
        for c in range(3):
            image[c] = gaussian_filter(image[c], blur_sigma)

    noise_level = 0.55 * level
    if noise_level > 0:
        for c in range(3):
            speckle = gaussian_filter(rng.standard_normal((h, w)), 0.8)
            image[c] = image[c] * (1.0 + noise_level * speckle)
    image = np.clip(image, 0.0, 1.0)

    return SynthSample(
        image=image, mask=mask, patient_id=-1, frame_id=-1,
        degradation={"level": float(level), "blur_sigma": float(blur_sigma),
                     "contrast_scale": float(contrast),
                     "noise_level": float(noise_level),
                     "occlusions": occlusions})


def _patient_geometry(rng: np.random.Generator, h: int, w: int) -> dict:
    r_out = (0.26 + 0.10 * rng.random()) * min(h, w)
    return {
        "cy": h / 2 + rng.uniform(-0.06, 0.06) * h,
        "cx": w / 2 + rng.uniform(-0.06, 0.06) * w,
        "ra": r_out,
        "rb": r_out * (0.78 + 0.22 * rng.random()),
        "inner": 0.52 + 0.18 * rng.random(),
        "phi": rng.uniform(0, np.pi),
    }


def _jitter(geo: dict, rng: np.random.Generator, h: int, w: int) -> dict:
    g = dict(geo)
    g["cy"] += rng.uniform(-0.02, 0.02) * h
    g["cx"] += rng.uniform(-0.02, 0.02) * w
    g["ra"] *= 1.0 + rng.uniform(-0.04, 0.04)
    g["rb"] *= 1.0 + rng.uniform(-0.04, 0.04)
    return g


def generate(seed: int, patients: int, frames_per_patient: int, h: int, w: int,
             degradation: tuple[float, float] = (0.0, 1.0)) -> SynthDataset:
    lo, hi = degradation
    split_rng = np.random.default_rng([seed, 7919])
    order = split_rng.permutation(patients)
    n_train = int(round(0.8 * patients))
    n_seg_train = n_train // 2
    split = {}
    for rank, pid in enumerate(order):
        if rank < n_seg_train:
            split[int(pid)] = "seg_train"
        elif rank < n_train:
            split[int(pid)] = "seg_eval"
        else:
            split[int(pid)] = "test"

    samples: dict[int, list[SynthSample]] = {}
    for pid in range(patients):
        prng = np.random.default_rng([seed, pid])
        geo = _patient_geometry(prng, h, w)
        frames = []
        for fid in range(frames_per_patient):
            frng = np.random.default_rng([seed, pid, fid])
            # bimodal quality: half the frames are near-clean acquisitions,
            # half carry obvious degradation, so per-frame quality genuinely
            # varies and the variation is visible in the image
            if frng.random() < 0.5:
                base_level = 0.35 * frng.random()
            else:
                base_level = 0.5 + 0.5 * frng.random()
            level = lo + (hi - lo) * base_level
            for attempt in range(20):
                g = _jitter(geo, frng, h, w)
                s = _render_frame(h, w, g, level, frng)
                frac = s.mask.mean()
                if 0.01 <= frac <= 0.60:
                    break
            else:
                raise RuntimeError(
                    f"patient {pid} frame {fid}: could not draw a mask with "
                    f"1-60% foreground after 20 attempts")
            s.patient_id = pid
            s.frame_id = fid
            frames.append(s)
        samples[pid] = frames

    manifest = DatasetManifest(seed=seed, patients=patients,
                               frames_per_patient=frames_per_patient,
                               height=h, width=w, degradation_lo=lo,
                               degradation_hi=hi, split=split)
    return SynthDataset(manifest=manifest, samples=samples)


def load_dataset(manifest_path) -> SynthDataset:
    """Regenerate the dataset its manifest describes (bit-identical)."""
    m = DatasetManifest.load(manifest_path)
    ds = generate(m.seed, m.patients, m.frames_per_patient, m.height, m.width,
                  (m.degradation_lo, m.degradation_hi))
    if ds.manifest.split != m.split:
        raise ValueError(f"{manifest_path}: split table does not match the "
                         f"generator output; file corrupted?")
    return ds


def save_png_tree(dataset: SynthDataset, root) -> None:
    """Portable 8-bit export: one directory per patient, RGB frame images
    plus grayscale {0,255} masks, and the manifest at the root."""
    from PIL import Image

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for pid, frames in sorted(dataset.samples.items()):
        pdir = root / f"p{pid:03d}"
        pdir.mkdir(exist_ok=True)
        for s in frames:
            rgb = np.round(s.image * 255).astype(np.uint8).transpose(1, 2, 0)
            Image.fromarray(rgb, "RGB").save(pdir / f"frame{s.frame_id:03d}.png")
            Image.fromarray(s.mask * 255, "L").save(
                pdir / f"frame{s.frame_id:03d}_mask.png")
    dataset.manifest.save(root / "manifest.txt")


def threshold_segmenter(image: np.ndarray) -> np.ndarray:
    """Reference segmenter: mid-intensity threshold on the channel mean."""
    mid = 0.5 * (BG_INTENSITY + FG_INTENSITY)
    return (image.mean(axis=0) > mid).astype(np.uint8)


def quality_spread_check(dataset: SynthDataset,
                         segment_fn: Callable[[np.ndarray], np.ndarray],
                         min_std: float = 0.05) -> dict:
    """Distribution of per-frame Dice under a reference segmenter; errors out
    if the spread is too small for quality regression to be meaningful."""
    frames = dataset.all_frames()
    scores = np.array([dice(segment_fn(s.image), s.mask) for s in frames])
    levels = np.array([s.degradation["level"] for s in frames])
    lo_q, hi_q = np.quantile(levels, [0.25, 0.75])
    stats = {
        "count": len(frames),
        "mean": float(scores.mean()),
        "std": float(scores.std()),
        "mean_low_degradation": float(scores[levels <= lo_q].mean()),
        "mean_high_degradation": float(scores[levels >= hi_q].mean()),
    }
    if stats["std"] < min_std:
        raise ValueError(
            f"per-frame Dice spread {stats['std']:.4f} < {min_std}; widen the "
            f"degradation range so quality prediction has variance to explain")
    return stats
