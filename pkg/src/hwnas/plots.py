"""Training-curve plots and searched-cell renderings."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .cells import topology_for
from .genotype import KIND_ORDER, Genotype
from .search import EpochStats, load_history


def render_cells(genotype: Genotype) -> str:
    """Text rendering of every searched cell: one line per edge."""
    lines = []
    for kind in KIND_ORDER:
        topo = topology_for(kind, genotype.m)
        lines.append(f"[{kind}] ({len(topo.edges)} searched edges)")
        for (src, dst, op_id), e in zip(genotype.edges[kind], topo.edges):
            lines.append(f"  {src} -> {dst}: {op_id}  ({e.set_name} set)")
        lines.append("")
    return "\n".join(lines)


def emit_plots(history_path, genotype_path, out_dir) -> list[Path]:
    """Loss-curve and entropy plots plus the cell rendering; regenerating
    from the same inputs reproduces identical files."""
    history = load_history(history_path)
    if not history:
        raise ValueError(f"{history_path}: history is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    epochs = [h.epoch for h in history]
    fig, ax = plt.subplots(figsize=(7, 4.5), dpi=110)
    ax.plot(epochs, [h.ce for h in history], label="cross entropy")
    ax.plot(epochs, [h.mse for h in history], label="quality MSE")
    ax.plot(epochs, [h.lat_ms for h in history], label="estimated latency (ms)")
    warmup_end = max([h.epoch for h in history if h.phase == "warmup"],
                     default=0)
    if warmup_end:
        ax.axvline(warmup_end + 0.5, color="gray", ls=":",
                   label="weights-only | alternating")
    ax.set_xlabel("epoch")
    ax.set_ylabel("per-epoch mean")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    p = out_dir / "loss_curves.png"
    fig.savefig(p, metadata={"Software": None})
    plt.close(fig)
    written.append(p)

    fig, ax = plt.subplots(figsize=(7, 3.5), dpi=110)
    ax.plot(epochs, [h.alpha_entropy for h in history], color="tab:purple")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean edge entropy (nats)")
    fig.tight_layout()
    p = out_dir / "alpha_entropy.png"
    fig.savefig(p, metadata={"Software": None})
    plt.close(fig)
    written.append(p)

    if genotype_path is not None and Path(genotype_path).exists():
        text = render_cells(Genotype.load(genotype_path))
        p = out_dir / "cells.txt"
        p.write_text(text)
        written.append(p)
    return written
