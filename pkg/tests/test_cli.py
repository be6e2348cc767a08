import filecmp
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from hwnas.cli import build_parser, main


def run_cli(args):
    return main(args)


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_gen_data_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for out in (a, b):
        rc = run_cli(["gen-data", "--seed", "7", "--patients", "3",
                      "--frames", "2", "--height", "16", "--width", "16",
                      "--out", str(out)])
        assert rc == 0
    assert tree_bytes(a) == tree_bytes(b)


def test_search_without_lut_errors(tmp_path, capsys):
    data = tmp_path / "data"
    run_cli(["gen-data", "--seed", "1", "--patients", "3", "--frames", "2",
             "--height", "16", "--width", "16", "--out", str(data)])
    rc = run_cli(["search", "--data", str(data),
                  "--lut", str(tmp_path / "missing.lut"),
                  "--run-dir", str(tmp_path / "run"), "--epochs", "1",
                  "--warmup-epochs", "1"])
    assert rc != 0
    err = capsys.readouterr().err
    assert "missing_artifact" in err and "profile" in err


def test_profile_rejects_multiple_workers(tmp_path, capsys):
    rc = run_cli(["profile", "--workers", "2", "--out",
                  str(tmp_path / "x.lut")])
    assert rc != 0
    assert "workers=1" in capsys.readouterr().err


def test_help_golden_listing(capsys):
    parser = build_parser()
    with pytest.raises(SystemExit):
        parser.parse_args(["--help"])
    out = capsys.readouterr().out
    for cmd in ("gen-data", "profile", "search", "derive", "train-derived",
                "bench", "report"):
        assert cmd in out


def test_subcommand_help_lists_defaults(capsys):
    parser = build_parser()
    with pytest.raises(SystemExit):
        parser.parse_args(["search", "--help"])
    out = capsys.readouterr().out
    for flag, default in (("--lambda2", "0.001"), ("--epochs", "80"),
                          ("--warmup-epochs", "40"), ("--seed", "0"),
                          ("--batch-size", "16")):
        assert flag in out and default in out


@pytest.fixture(scope="module")
def mini_pipeline_dir(tmp_path_factory):
    """Full pipeline at miniature scale: gen-data -> profile -> search ->
    derive -> train-derived -> bench -> report."""
    root = tmp_path_factory.mktemp("mini")
    data = root / "data"
    lut = root / "latency.lut"
    run = root / "run"
    size = dict(h="16", w="16")
    assert run_cli(["gen-data", "--seed", "3", "--patients", "6",
                    "--frames", "3", "--height", size["h"], "--width",
                    size["w"], "--out", str(data)]) == 0
    assert run_cli(["profile", "--seed", "0", "--height", size["h"],
                    "--width", size["w"], "--depth", "2", "--qc-pairs", "2",
                    "--samples", "20", "--warmup", "3",
                    "--out", str(lut)]) == 0
    assert run_cli(["search", "--data", str(data), "--lut", str(lut),
                    "--run-dir", str(run), "--epochs", "2",
                    "--warmup-epochs", "1", "--depth", "2", "--qc-pairs", "2",
                    "--height", size["h"], "--width", size["w"],
                    "--batch-size", "6", "--seed", "0"]) == 0
    assert run_cli(["derive", "--run-dir", str(run)]) == 0
    assert run_cli(["train-derived", "--data", str(data), "--genotype",
                    str(run / "genotype.txt"), "--run-dir", str(run),
                    "--retrain-epochs", "2", "--batch-size", "6",
                    "--baseline", "--seed", "0"]) == 0
    assert run_cli(["bench", "--genotype", str(run / "genotype.txt"),
                    "--run-dir", str(run), "--lut", str(lut), "--height",
                    size["h"], "--width", size["w"], "--samples", "20",
                    "--warmup", "3", "--baseline", "--seed", "0"]) == 0
    assert run_cli(["report", "--run-dir", str(run), "--plots"]) == 0
    return root, data, lut, run


def test_pipeline_artifacts_exist(mini_pipeline_dir):
    root, data, lut, run = mini_pipeline_dir
    for f in ("config.txt", "history.csv", "alphas.ckpt", "supernet.ckpt",
              "genotype.txt", "weights.ckpt", "metrics.txt",
              "baseline_metrics.txt", "bench.txt", "report.txt",
              "loss_curves.png", "alpha_entropy.png", "cells.txt"):
        assert (run / f).exists(), f


def test_report_has_columns_and_units(mini_pipeline_dir):
    root, data, lut, run = mini_pipeline_dir
    text = (run / "report.txt").read_text()
    assert "Dice" in text and "MAE" in text
    assert "Latency(ms)" in text and "FLOPs(M)" in text
    assert "unet8_baseline" in text
    assert "estimate_vs_measured.rel_err=" in text


def test_cells_rendering_lists_twelve_edges_per_seg_cell(mini_pipeline_dir):
    root, data, lut, run = mini_pipeline_dir
    text = (run / "cells.txt").read_text()
    assert "[DownCell] (12 searched edges)" in text
    assert "[UpCell] (12 searched edges)" in text
    assert "[Contracting] (6 searched edges)" in text
    down_block = text.split("[DownCell]")[1].split("[UpCell]")[0]
    edge_lines = [l for l in down_block.splitlines() if "->" in l]
    assert len(edge_lines) == 12


def test_plots_regenerate_identically(mini_pipeline_dir, tmp_path):
    from hwnas.plots import emit_plots
    root, data, lut, run = mini_pipeline_dir
    out2 = tmp_path / "plots2"
    emit_plots(run / "history.csv", run / "genotype.txt", out2)
    for name in ("loss_curves.png", "alpha_entropy.png", "cells.txt"):
        assert (run / name).read_bytes() == (out2 / name).read_bytes()


def test_genotype_file_loadable_and_valid(mini_pipeline_dir):
    from hwnas.genotype import Genotype
    root, data, lut, run = mini_pipeline_dir
    g = Genotype.load(run / "genotype.txt")
    g.validate()
    assert len(g.edges["DownCell"]) == 12
    assert len(g.edges["Contracting"]) == 6


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "hwnas.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "gen-data" in proc.stdout
