"""Command-line surface for the full pipeline.

Subcommands map 1:1 onto the library stages:

    gen-data      -> synthetic dataset (PNG tree + manifest)
    profile       -> operator latency LUT for the configured supernets
    search        -> joint architecture search (history, logits, weights)
    derive        -> discrete genotype from the searched logits
    train-derived -> retrain the derived pipeline from scratch (+ baseline)
    bench         -> measured latency and FLOPs of the derived pipeline
    report        -> assembled comparison table (+ plots)

Every command accepts --seed and has defaults for every flag. Artifacts are
plain files under a run directory; commands never mutate another command's
inputs. Errors exit nonzero with one machine-parsable line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np


def _default_run_dir(seed: int) -> str:
    return time.strftime(f"runs/%Y%m%d-%H%M%S-s{seed}")


def _require(path: Path, producer: str) -> Path:
    if not Path(path).exists():
        raise FileNotFoundError(
            f"missing_artifact path={path} hint=run `{producer}` first")
    return Path(path)


def cmd_gen_data(args) -> int:
    from .synthdata import generate, save_png_tree

    ds = generate(args.seed, args.patients, args.frames, args.height,
                  args.width, (args.degradation_lo, args.degradation_hi))
    save_png_tree(ds, args.out)
    print(f"wrote dataset: {args.out} ({args.patients} patients x "
          f"{args.frames} frames, {args.height}x{args.width})")
    return 0


def _build_supernets(args, seed: int):
    from .qc import QcSupernet
    from .seg import SegSupernet

    dt = np.float32 if args.dtype == "float32" else np.float64
    ss = np.random.SeedSequence(seed)
    r1, r2 = [np.random.default_rng(s) for s in ss.spawn(2)]
    seg = SegSupernet(depth=args.depth, m=args.m, filters=args.seg_filters,
                      rng=r1, dtype=dt)
    qc = QcSupernet(pairs=args.qc_pairs, m=args.m, filters=args.qc_filters,
                    rng=r2, dtype=dt)
    return seg, qc


def cmd_profile(args) -> int:
    from .latency import profile_supernets

    if args.workers != 1:
        raise ValueError("workers=1 required: profiling measures "
                         "single-thread latency")
    seg, qc = _build_supernets(args, args.seed)
    lut = profile_supernets(seg, qc, n=args.batch, h=args.height, w=args.width,
                            samples=args.samples, warmup=args.warmup,
                            seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lut.save(out)
    print(f"wrote LUT: {out} ({len(lut.entries)} entries)")
    return 0


def _config_from_args(args) -> "SearchConfig":
    from .search import SearchConfig

    fields = {f.name for f in dataclasses.fields(SearchConfig)}
    kwargs = {k: v for k, v in vars(args).items() if k in fields}
    return SearchConfig(**kwargs).validate()


def _load_data(path):
    from .synthdata import load_dataset

    p = Path(path)
    manifest = p / "manifest.txt" if p.is_dir() else p
    _require(manifest, "gen-data")
    return load_dataset(manifest)


def cmd_search(args) -> int:
    from .checkpoint import save_state
    from .latency import LatencyLUT
    from .search import SplitPlan, save_history, search

    cfg = _config_from_args(args)
    dataset = _load_data(args.data)
    lut = LatencyLUT.load(_require(args.lut, "profile"))
    splits = SplitPlan.from_manifest(dataset.manifest)
    run_dir = Path(args.run_dir or _default_run_dir(args.seed))
    run_dir.mkdir(parents=True, exist_ok=True)

    result = search(cfg, splits, dataset, lut, args.seed)

    cfg.to_file(run_dir / "config.txt")
    save_history(result.history, run_dir / "history.csv")
    save_state(run_dir / "alphas.ckpt", result.alphas.state())
    state = {}
    for net in (result.seg, result.qc):
        for name, t in net.named_params():
            state[name] = t.data
        for name, arr in net.named_buffers():
            state[name] = arr
    save_state(run_dir / "supernet.ckpt", state)
    last = result.history[-1]
    print(f"search done: {run_dir} (final ce={last.ce:.4f} mse={last.mse:.4f} "
          f"lat={last.lat_ms:.3f}ms entropy={last.alpha_entropy:.3f})")
    return 0


def _alphas_from_run(run_dir: Path):
    from .cells import ArchParams, topology_for
    from .checkpoint import load_state
    from .search import SearchConfig

    cfg = SearchConfig.from_file(_require(run_dir / "config.txt", "search"))
    kinds = [topology_for(k, cfg.m)
             for k in ("DownCell", "UpCell", "Contracting", "NonScaling")]
    alphas = ArchParams(kinds, dtype=cfg.np_dtype())
    alphas.load_state(load_state(_require(run_dir / "alphas.ckpt", "search")))
    return cfg, alphas


def cmd_derive(args) -> int:
    from .genotype import derive

    run_dir = Path(args.run_dir)
    cfg, alphas = _alphas_from_run(run_dir)
    genotype = derive(alphas, cfg, top2_per_node=args.top2)
    out = Path(args.out or run_dir / "genotype.txt")
    out.parent.mkdir(parents=True, exist_ok=True)
    genotype.save(out)
    print(f"wrote genotype: {out}")
    return 0


def cmd_train_derived(args) -> int:
    from .checkpoint import save_state
    from .genotype import (BaselinePipeline, Genotype, build_pipeline, retrain)
    from .search import SearchConfig

    dataset = _load_data(args.data)
    genotype = Genotype.load(_require(args.genotype, "derive"))
    run_dir = Path(args.run_dir or _default_run_dir(args.seed))
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg_path = run_dir / "config.txt"
    cfg = SearchConfig.from_file(cfg_path) if cfg_path.exists() else SearchConfig()
    cfg = dataclasses.replace(cfg, retrain_epochs=args.retrain_epochs,
                              batch_size=args.batch_size)

    pipeline = build_pipeline(genotype, rng=np.random.default_rng(args.seed),
                              dtype=cfg.np_dtype())
    metrics = retrain(pipeline, dataset, cfg, seed=args.seed)
    save_state(run_dir / "weights.ckpt", pipeline.state())
    _write_kv(run_dir / "metrics.txt", metrics)
    print(f"derived pipeline: val_dice={metrics['val_dice']:.4f} "
          f"val_mae={metrics['val_mae']:.4f} const_mae={metrics['const_mae']:.4f}")

    if args.baseline:
        base = BaselinePipeline(filters=8, rng=np.random.default_rng(args.seed),
                                dtype=cfg.np_dtype())
        bmetrics = retrain(base, dataset, cfg, seed=args.seed)
        save_state(run_dir / "baseline_weights.ckpt", base.state())
        _write_kv(run_dir / "baseline_metrics.txt", bmetrics)
        print(f"baseline: val_dice={bmetrics['val_dice']:.4f} "
              f"val_mae={bmetrics['val_mae']:.4f}")
    return 0


def _write_kv(path, kv: dict) -> None:
    Path(path).write_text(
        "\n".join(f"{k}={v!r}" for k, v in sorted(kv.items())) + "\n")


def _read_kv(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        k, _, v = line.partition("=")
        out[k] = float(v)
    return out


def _bench_pipeline(pipeline, args, lut_path, chosen=None):
    from .latency import (LatencyLUT, LatencyPlan, measure_wallclock)

    rng = np.random.default_rng(args.seed)
    x = rng.uniform(0, 1, size=(1, 3, args.height, args.width))
    measured = measure_wallclock(lambda: pipeline.infer(x),
                                 samples=args.samples, warmup=args.warmup)
    out = {"latency_ms": measured,
           "flops_m": pipeline.flops(args.height, args.width) / 1e6}
    if lut_path and chosen is not None:
        from .qc import QcSupernet
        from .seg import SegSupernet

        lut = LatencyLUT.load(_require(lut_path, "profile"))
        g = pipeline.genotype
        seg = SegSupernet(depth=g.depth, m=g.m, filters=g.seg_filters,
                          rng=np.random.default_rng(0), dtype=np.float32)
        qc = QcSupernet(pairs=g.qc_pairs, m=g.m, filters=g.qc_filters,
                        rng=np.random.default_rng(1), dtype=np.float32)
        plan = LatencyPlan.from_nets(seg, qc, n=1, h=args.height, w=args.width)
        est = plan.chosen_us(chosen, lut) / 1000.0
        out["estimate_ms"] = est
        out["estimate_rel_err"] = abs(est - measured) / max(measured, 1e-9)
    return out


def cmd_bench(args) -> int:
    from .checkpoint import load_state
    from .genotype import BaselinePipeline, Genotype, build_pipeline

    if args.workers != 1:
        raise ValueError("workers=1 required: benchmarking measures "
                         "single-thread latency")
    genotype = Genotype.load(_require(args.genotype, "derive"))
    run_dir = Path(args.run_dir or _default_run_dir(args.seed))
    run_dir.mkdir(parents=True, exist_ok=True)
    pipeline = build_pipeline(genotype, rng=np.random.default_rng(args.seed),
                              dtype=np.float32)
    weights = args.weights or (run_dir / "weights.ckpt")
    if Path(weights).exists():
        pipeline.load_state(load_state(weights))
    kv = {}
    bench = _bench_pipeline(pipeline, args, args.lut, genotype.chosen())
    kv.update({f"derived.{k}": v for k, v in bench.items()})

    if args.baseline:
        base = BaselinePipeline(filters=8, rng=np.random.default_rng(args.seed),
                                dtype=np.float32)
        bw = run_dir / "baseline_weights.ckpt"
        if bw.exists():
            base.load_state(load_state(bw))
        bench_b = _bench_pipeline(base, args, None)
        kv.update({f"baseline.{k}": v for k, v in bench_b.items()})
    _write_kv(run_dir / "bench.txt", kv)
    print("bench: " + " ".join(f"{k}={v:.4f}" for k, v in sorted(kv.items())))
    return 0


def cmd_report(args) -> int:
    from .genotype import format_report

    run_dir = Path(args.run_dir)
    metrics = _read_kv(_require(run_dir / "metrics.txt", "train-derived"))
    bench = _read_kv(_require(run_dir / "bench.txt", "bench"))
    rows = [{"method": "derived", "dice": metrics["val_dice"],
             "mae": metrics["val_mae"],
             "latency_ms": bench["derived.latency_ms"],
             "flops_m": bench["derived.flops_m"]}]
    if (run_dir / "baseline_metrics.txt").exists() and "baseline.latency_ms" in bench:
        bm = _read_kv(run_dir / "baseline_metrics.txt")
        rows.append({"method": "unet8_baseline", "dice": bm["val_dice"],
                     "mae": bm["val_mae"],
                     "latency_ms": bench["baseline.latency_ms"],
                     "flops_m": bench["baseline.flops_m"]})
    extras = {"derived.const_mae": metrics["const_mae"],
              "host_note": "'latencies measured on the build host'"}
    for k in ("derived.estimate_ms", "derived.estimate_rel_err"):
        if k in bench:
            extras[k.replace("derived.", "estimate_vs_measured.")
                   .replace("estimate_vs_measured.estimate_ms", "estimate_ms")
                   .replace("estimate_vs_measured.estimate_rel_err", "estimate_vs_measured.rel_err")] = bench[k]
    text = format_report(rows, extras)
    (run_dir / "report.txt").write_text(text)
    print(text, end="")

    if args.plots:
        from .plots import emit_plots
        written = emit_plots(_require(run_dir / "history.csv", "search"),
                             run_dir / "genotype.txt", run_dir)
        print("plots: " + " ".join(str(p) for p in written))
    return 0


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="hwnas",
        description="Hardware-aware architecture search for a segmentation "
                    "+ quality-control pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--seed", type=int, default=0, help="random seed")

    p = sub.add_parser("gen-data", formatter_class=fmt,
                       help="generate the synthetic dataset")
    add_common(p)
    p.add_argument("--patients", type=int, default=40, help="patient count")
    p.add_argument("--frames", type=int, default=30, help="frames per patient")
    p.add_argument("--height", type=int, default=32, help="image height")
    p.add_argument("--width", type=int, default=32, help="image width")
    p.add_argument("--degradation-lo", type=float, default=0.0,
                   help="lower end of the degradation range")
    p.add_argument("--degradation-hi", type=float, default=1.0,
                   help="upper end of the degradation range")
    p.add_argument("--out", default="data/synth", help="dataset directory")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("profile", formatter_class=fmt,
                       help="profile operator latencies into a LUT")
    add_common(p)
    p.add_argument("--height", type=int, default=32, help="input height")
    p.add_argument("--width", type=int, default=32, help="input width")
    p.add_argument("--batch", type=int, default=1, help="profiled batch size")
    p.add_argument("--samples", type=int, default=23,
                   help="timed samples per entry (median is stored)")
    p.add_argument("--warmup", type=int, default=5,
                   help="discarded warmup runs per entry")
    p.add_argument("--depth", type=int, default=3, help="seg Down/Up cells")
    p.add_argument("--m", type=int, default=3, help="intermediate nodes")
    p.add_argument("--seg-filters", type=int, default=4,
                   help="seg initial filters")
    p.add_argument("--qc-filters", type=int, default=8,
                   help="QC initial filters")
    p.add_argument("--qc-pairs", type=int, default=3,
                   help="QC Contracting/Non-scaling pairs")
    p.add_argument("--dtype", default="float32", help="profiled dtype")
    p.add_argument("--workers", type=int, default=1,
                   help="must stay 1; latency is single-thread")
    p.add_argument("--out", default="data/latency.lut", help="LUT path")
    p.set_defaults(fn=cmd_profile)

    p = sub.add_parser("search", formatter_class=fmt,
                       help="run the joint architecture search")
    add_common(p)
    p.add_argument("--data", default="data/synth",
                   help="dataset directory or manifest path")
    p.add_argument("--lut", default="data/latency.lut", help="latency LUT")
    p.add_argument("--run-dir", default=None,
                   help="artifact directory (default: runs/<timestamp>-s<seed>)")
    p.add_argument("--epochs", type=int, default=80, help="total epochs")
    p.add_argument("--warmup-epochs", dest="warmup_epochs", type=int,
                   default=40, help="weight-only epochs before alternation")
    p.add_argument("--lambda1", type=float, default=1.0,
                   help="quality-MSE loss weight")
    p.add_argument("--lambda2", type=float, default=0.001,
                   help="latency loss weight per millisecond")
    p.add_argument("--m", type=int, default=3, help="intermediate nodes")
    p.add_argument("--depth", type=int, default=3, help="seg Down/Up cells")
    p.add_argument("--seg-filters", dest="seg_filters", type=int, default=4,
                   help="seg initial filters")
    p.add_argument("--qc-filters", dest="qc_filters", type=int, default=8,
                   help="QC initial filters")
    p.add_argument("--qc-pairs", dest="qc_pairs", type=int, default=3,
                   help="QC Contracting/Non-scaling pairs")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=16,
                   help="training batch size")
    p.add_argument("--lr-weights", dest="lr_weights", type=float,
                   default=0.05, help="SGD learning rate for weights")
    p.add_argument("--lr-alpha", dest="lr_alpha", type=float, default=3e-3,
                   help="Adam learning rate for architecture logits")
    p.add_argument("--tau", type=float, default=1.0,
                   help="Gumbel-Softmax temperature")
    p.add_argument("--tau-anneal", dest="tau_anneal", action="store_true",
                   default=False, help="anneal tau linearly from 5 to 1")
    p.add_argument("--height", type=int, default=32, help="input height")
    p.add_argument("--width", type=int, default=32, help="input width")
    p.add_argument("--dtype", default="float32", help="training dtype")
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("derive", formatter_class=fmt,
                       help="derive the discrete genotype from a search run")
    add_common(p)
    p.add_argument("--run-dir", required=False, default="runs/latest",
                   help="search run directory")
    p.add_argument("--out", default=None,
                   help="genotype path (default: <run-dir>/genotype.txt)")
    p.add_argument("--top2", action="store_true", default=False,
                   help="also prune to the 2 strongest inter-node edges per node")
    p.set_defaults(fn=cmd_derive)

    p = sub.add_parser("train-derived", formatter_class=fmt,
                       help="retrain the derived pipeline from scratch")
    add_common(p)
    p.add_argument("--data", default="data/synth",
                   help="dataset directory or manifest path")
    p.add_argument("--genotype", default="runs/latest/genotype.txt",
                   help="genotype file")
    p.add_argument("--run-dir", default=None,
                   help="artifact directory (default: runs/<timestamp>-s<seed>)")
    p.add_argument("--retrain-epochs", dest="retrain_epochs", type=int,
                   default=30, help="segmentation retraining epochs")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=16,
                   help="training batch size")
    p.add_argument("--baseline", action="store_true", default=False,
                   help="also train the handcrafted U-net(8)+regressor baseline")
    p.set_defaults(fn=cmd_train_derived)

    p = sub.add_parser("bench", formatter_class=fmt,
                       help="measure wall-clock latency and count FLOPs")
    add_common(p)
    p.add_argument("--genotype", default="runs/latest/genotype.txt",
                   help="genotype file")
    p.add_argument("--weights", default=None,
                   help="weights checkpoint (default: <run-dir>/weights.ckpt)")
    p.add_argument("--run-dir", default=None,
                   help="artifact directory (default: runs/<timestamp>-s<seed>)")
    p.add_argument("--lut", default=None,
                   help="optional LUT for the estimate-vs-measured figure")
    p.add_argument("--height", type=int, default=32, help="input height")
    p.add_argument("--width", type=int, default=32, help="input width")
    p.add_argument("--samples", type=int, default=23,
                   help="timed samples (median is reported)")
    p.add_argument("--warmup", type=int, default=5,
                   help="discarded warmup runs")
    p.add_argument("--workers", type=int, default=1,
                   help="must stay 1; latency is single-thread")
    p.add_argument("--baseline", action="store_true", default=False,
                   help="also bench the handcrafted baseline")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("report", formatter_class=fmt,
                       help="emit the comparison table (and plots)")
    add_common(p)
    p.add_argument("--run-dir", default="runs/latest",
                   help="run directory with metrics and bench artifacts")
    p.add_argument("--plots", action="store_true", default=False,
                   help="also write loss/entropy plots and cell renderings")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
