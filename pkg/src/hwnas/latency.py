"""Operator latency: micro-profiled lookup table and the differentiable
expected-latency estimate.

Every primitive operation reachable in either supernet is timed at its
actual tensor configuration (median of wall-clock samples after warmup) and
persisted to a text LUT. During search, each edge's expected latency is the
Gumbel-Softmax-weighted sum of its candidates' LUT entries; the framework
estimate sums all edges of all cell instances plus constant terms for the
fixed components (stems, preprocessors, heads, residual paths).

Profiling and wall-clock measurement are strictly single-threaded; they
time inference-mode forwards with no autodiff graph.
"""

from __future__ import annotations

import gc
import platform
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import nn
from . import tensor as T
from .cells import ArchParams
from .tensor import Tensor

Key = tuple  # (op_id, n, cin, cout, h, w, extra)

LUT_MAGIC = "hwnas-lut v1"


def key_str(key: Key) -> str:
    return " ".join(str(p) for p in key)


class LatencyLUT:
    """Map from (op id, shape config) to measured latency in microseconds."""

    def __init__(self, entries: Optional[dict[Key, float]] = None,
                 meta: Optional[list[tuple[str, str]]] = None):
        self.entries: dict[Key, float] = dict(entries or {})
        self.meta: list[tuple[str, str]] = list(meta or [])

    def get(self, key: Key) -> float:
        try:
            return self.entries[key]
        except KeyError:
            raise KeyError(
                f"latency LUT has no entry for '{key_str(key)}'; "
                f"re-run profiling with matching shapes") from None

    def vector(self, keys) -> np.ndarray:
        return np.array([self.get(k) for k in keys], dtype=np.float64)

    def save(self, path) -> None:
        lines = [f"# {LUT_MAGIC}"]
        for k, v in self.meta:
            lines.append(f"# {k}: {v}")
        for key in sorted(self.entries, key=key_str):
            lines.append(f"{key_str(key)} {self.entries[key]!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "LatencyLUT":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"latency LUT not found: {path}")
        lines = path.read_text().splitlines()
        if not lines or lines[0] != f"# {LUT_MAGIC}":
            raise ValueError(f"{path}: not a '{LUT_MAGIC}' file")
        meta = []
        entries = {}
        for line in lines[1:]:
            if not line.strip():
                continue
            if line.startswith("# "):
                k, _, v = line[2:].partition(": ")
                meta.append((k, v))
                continue
            parts = line.split(" ")
            op_id, n, cin, cout, h, w, extra, lat = parts
            entries[(op_id, int(n), int(cin), int(cout), int(h), int(w),
                     extra)] = float(lat)
        return cls(entries, meta)


def timer_resolution_ns() -> int:
    best = None
    for _ in range(30):
        t0 = time.perf_counter_ns()
        t1 = time.perf_counter_ns()
        while t1 == t0:
            t1 = time.perf_counter_ns()
        d = t1 - t0
        best = d if best is None else min(best, d)
    return int(best)


def time_callable(fn: Callable[[], object], samples: int, warmup: int) -> float:
    """Median wall-clock microseconds of fn() after discarded warmup runs.

    The collector is paused while timing; GC pauses otherwise dominate the
    sub-100us operators being measured.
    """
    gc_was = gc.isenabled()
    gc.disable()
    try:
        for _ in range(warmup):
            fn()
        times = np.empty(samples, dtype=np.float64)
        for i in range(samples):
            t0 = time.perf_counter_ns()
            fn()
            times[i] = time.perf_counter_ns() - t0
        return float(np.median(times)) / 1000.0
    finally:
        if gc_was:
            gc.enable()


def profile_items(items: dict[Key, Callable], samples: int = 23,
                  warmup: int = 5, seed: int = 0) -> LatencyLUT:
    """items: key -> prepare(rng) returning the zero-arg callable to time.

    The zero op is recorded at exactly 0.0 us: it performs no computation
    and its edges are removed outright in derived networks.
    """
    if warmup < 3 or samples < 20:
        raise ValueError("profiling needs warmup >= 3 and samples >= 20")
    rng = np.random.default_rng(seed)
    lut = LatencyLUT()
    res_ns = timer_resolution_ns()
    with nn.mode(training=False), T.no_grad():
        bound = {}
        for key in sorted(items, key=key_str):
            if key[0] == "zero":
                lut.entries[key] = 0.0
                continue
            try:
                bound[key] = items[key](rng)
                bound[key]()  # untimed pre-pass warms the whole working set
            except Exception as exc:
                raise RuntimeError(
                    f"unmeasurable op '{key_str(key)}': {exc}") from exc
        for key, fn in bound.items():
            lut.entries[key] = time_callable(fn, samples, warmup)
    lut.meta = [
        ("host", platform.platform()),
        ("timer_resolution_ns", str(res_ns)),
        ("samples", str(samples)),
        ("warmup", str(warmup)),
        ("timestamp", datetime.now(timezone.utc).isoformat(timespec="seconds")),
    ]
    nonzero = [v for v in lut.entries.values() if v > 0]
    if nonzero and res_ns / 1000.0 > 0.1 * min(nonzero):
        lut.meta.append(("warning",
                         f"timer resolution {res_ns} ns exceeds 10% of the "
                         f"smallest latency {min(nonzero):.3f} us"))
    return lut


def _op_prepare(op, key: Key):
    _, n, cin, _, h, w, _ = key

    def prepare(rng):
        x = Tensor(rng.normal(size=(n, cin, h, w)).astype(np.float32))
        return lambda: op(x)

    return prepare


def collect_profile_items(seg, qc, n: int = 1, h: int = 32,
                          w: int = 32) -> dict[Key, Callable]:
    items: dict[Key, Callable] = {}
    for net in (seg, qc):
        searched, fixed = net.latency_items(n, h, w)
        for rec in searched:
            for key, op in zip(rec["keys"], rec["ops"]):
                items.setdefault(key, _op_prepare(op, key))
        for key, prepare in fixed:
            items.setdefault(key, prepare)
    return items


def profile_supernets(seg, qc, n: int = 1, h: int = 32, w: int = 32,
                      samples: int = 23, warmup: int = 5,
                      seed: int = 0) -> LatencyLUT:
    return profile_items(collect_profile_items(seg, qc, n, h, w),
                         samples=samples, warmup=warmup, seed=seed)


# -- differentiable estimate -----------------------------------------------------


def gumbel_noise(rng: np.random.Generator, k: int) -> np.ndarray:
    u = np.clip(rng.random(k), 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def edge_latency(alpha: Tensor, lut_values: np.ndarray, tau: float,
                 rng: np.random.Generator) -> Tensor:
    """Gumbel-Softmax expected latency of one edge, in microseconds.

    Draws one fresh Gumbel sample per call; the LUT values enter as
    constants, so the result is differentiable w.r.t. alpha only.
    """
    if tau <= 0:
        raise ValueError(f"Gumbel-Softmax temperature must be positive, got {tau}")
    k = alpha.data.shape[0]
    if k < 1:
        raise ValueError("edge needs at least one candidate")
    # float64 throughout so one-hot estimates reproduce LUT sums exactly
    a64 = T.astype(alpha, np.float64) if alpha.dtype != np.float64 else alpha
    g = gumbel_noise(rng, k)
    weights = T.softmax(T.mul_scalar(a64 + Tensor(g), 1.0 / tau), axis=0)
    return T.tsum(T.mul(weights, Tensor(np.asarray(lut_values, dtype=np.float64))))


class LatencyPlan:
    """Static latency bookkeeping for one (seg, qc) supernet pair at a fixed
    input configuration: per-edge-instance LUT keys plus fixed-component
    keys."""

    def __init__(self, searched: list[dict], fixed_keys: list[Key]):
        self.searched = searched
        self.fixed_keys = fixed_keys

    @classmethod
    def from_nets(cls, seg, qc, n: int = 1, h: int = 32, w: int = 32):
        searched = []
        fixed_keys = []
        for net in (seg, qc):
            s, f = net.latency_items(n, h, w)
            searched.extend(s)
            fixed_keys.extend(key for key, _ in f)
        return cls(searched, fixed_keys)

    def check_coverage(self, lut: LatencyLUT) -> None:
        missing = []
        for rec in self.searched:
            missing += [k for k in rec["keys"] if k not in lut.entries]
        missing += [k for k in self.fixed_keys if k not in lut.entries]
        if missing:
            raise KeyError(
                f"latency LUT is missing {len(missing)} entries, first: "
                f"'{key_str(missing[0])}'; run profiling first")

    def fixed_us(self, lut: LatencyLUT) -> float:
        return float(sum(lut.get(k) for k in self.fixed_keys))

    def estimate(self, alphas: ArchParams, lut: LatencyLUT, tau: float,
                 rng: np.random.Generator) -> Tensor:
        """Differentiable whole-framework latency estimate in milliseconds."""
        total: Optional[Tensor] = None
        for rec in self.searched:
            a = alphas.tables[rec["kind"]][rec["edge_idx"]]
            e = edge_latency(a, lut.vector(rec["keys"]), tau, rng)
            total = e if total is None else total + e
        const = self.fixed_us(lut)
        return T.mul_scalar(total + Tensor(np.asarray(const, dtype=total.dtype)),
                            1e-3)

    def chosen_us(self, chosen: dict[tuple[str, int], str],
                  lut: LatencyLUT) -> float:
        """Plain LUT sum for a discrete choice per (kind, edge_idx)."""
        total = self.fixed_us(lut)
        for rec in self.searched:
            op_id = chosen[(rec["kind"], rec["edge_idx"])]
            ids = [k[0] for k in rec["keys"]]
            total += lut.get(rec["keys"][ids.index(op_id)])
        return total


def measure_wallclock(fn: Callable[[], object], samples: int = 23,
                      warmup: int = 5) -> float:
    """Median single-call wall-clock latency of fn() in milliseconds."""
    if warmup < 3 or samples < 20:
        raise ValueError("measurement needs warmup >= 3 and samples >= 20")
    with nn.mode(training=False), T.no_grad():
        return time_callable(fn, samples, warmup) / 1000.0
