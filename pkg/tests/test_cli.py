import csv
import filecmp
import math
import os
import subprocess
import sys

import numpy as np
import pytest

from octcodec.codec import HEADER_SIZE
from octcodec.cli import EXIT_DATA, EXIT_INTERNAL, EXIT_OK, EXIT_USAGE, main
from octcodec.context import slice_segments
from octcodec.model import load_model
from octcodec.octree import build_octree
from octcodec.pointcloud import compute_bbox, load_ply, quantize

SMALL = ["--depth", "4", "--n", "32", "--g", "4", "--m", "3", "--d-model", "16", "--heads", "2",
         "--ffn-mult", "2", "--batch-rows", "512"]


def rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    for kind, seed in (("sphere-surface", 0), ("plane", 100), ("gaussian-blobs", 200), ("uniform-cube", 300)):
        assert main(["synth", "--kind", kind, "--count", "5", "--points", "60", "--seed", str(seed),
                     "--out-dir", str(d)]) == EXIT_OK
    return d


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    d = tmp_path_factory.mktemp("models")
    pre = str(d / "pre.octm")
    model = str(d / "model.octm")
    assert main(["pretrain", "--corpus", str(corpus), "--model", pre, "--epochs", "2"] + SMALL) == EXIT_OK
    assert main(["train", "--corpus", str(corpus), "--init", pre, "--model", model, "--epochs", "3"]
                + SMALL) == EXIT_OK
    return pre, model


def test_synth_deterministic(tmp_path):
    for out in ("a", "b"):
        assert main(["synth", "--kind", "gaussian-blobs", "--count", "2", "--points", "50", "--seed", "7",
                     "--out-dir", str(tmp_path / out)]) == EXIT_OK
    names = sorted(os.listdir(tmp_path / "a"))
    assert names == ["gaussian-blobs_00007.ply", "gaussian-blobs_00008.ply"]
    assert all(filecmp.cmp(tmp_path / "a" / n, tmp_path / "b" / n, shallow=False) for n in names)


def test_train_log_and_checkpoints(trained, corpus):
    pre, model = trained
    log = rows(model + ".loss.csv")
    assert [int(r["epoch"]) for r in log] == [1, 2, 3]
    assert float(log[-1]["loss"]) < float(log[0]["loss"])
    assert all(r["phase"] == "train" for r in log)
    assert rows(pre + ".loss.csv")[0]["phase"] == "pretrain"
    assert load_model(pre).checksum != load_model(model).checksum
    assert os.path.exists(model + ".opt.npz")


def test_resume_continues_step_count(corpus, tmp_path):
    model = str(tmp_path / "r.octm")
    base = ["train", "--corpus", str(corpus), "--model", model] + SMALL
    assert main(base + ["--epochs", "1"]) == EXIT_OK
    steps = int(rows(model + ".loss.csv")[-1]["step"])
    assert main(base + ["--epochs", "2", "--resume"]) == EXIT_OK
    log = rows(model + ".loss.csv")
    assert [int(r["epoch"]) for r in log] == [1, 2]
    assert int(log[-1]["step"]) == 2 * steps
    # an uninterrupted two-epoch run ends at the same parameters
    straight = str(tmp_path / "s.octm")
    assert main(["train", "--corpus", str(corpus), "--model", straight, "--epochs", "2"] + SMALL) == EXIT_OK
    assert load_model(straight).checksum == load_model(model).checksum


def test_encode_decode_eval(trained, corpus, tmp_path):
    _, model = trained
    src = str(sorted(corpus.iterdir())[0])
    ecmo, ply = str(tmp_path / "x.ecmo"), str(tmp_path / "x.ply")
    coding = ["--depth", "4", "--n", "32", "--g", "4"]
    assert main(["encode", "--input", src, "--output", ecmo, "--model", model,
                 "--debug-tables", str(tmp_path / "e.npz")] + coding) == EXIT_OK
    assert main(["decode", "--input", ecmo, "--output", ply, "--model", model,
                 "--debug-tables", str(tmp_path / "d.npz")]) == EXIT_OK
    assert np.array_equal(np.load(tmp_path / "e.npz")["freq"], np.load(tmp_path / "d.npz")["freq"])
    pc = load_ply(src)
    bbox = compute_bbox(pc)
    assert quantize(load_ply(ply), bbox, 4) == quantize(pc, bbox, 4)
    report = str(tmp_path / "r.csv")
    assert main(["eval", "--input", src, "--model", model, "--report", report] + coding) == EXIT_OK
    (row,) = rows(report)
    assert row["lossless"] == "True" and row["mode"] == "multi-group"
    assert math.isclose(float(row["bpp"]), 8 * (os.path.getsize(ecmo) - HEADER_SIZE) / len(pc))


def test_bench_group_sweep(trained, corpus, tmp_path):
    report = str(tmp_path / "b.csv")
    evald = str(sorted(corpus.iterdir())[0])
    assert main(["bench", "--corpus", str(corpus), "--eval-corpus", evald, "--g-list", "1,2,4,8",
                 "--epochs", "1", "--report", report] + SMALL) == EXIT_OK
    out = rows(report)
    assert [int(r["g"]) for r in out] == [1, 2, 4, 8]
    assert len({r["model_checksum"] for r in out}) == 4  # one model per cell


def test_bench_segment_sweep_counts(trained, corpus, tmp_path):
    _, model = trained
    report = str(tmp_path / "n.csv")
    src = str(sorted(corpus.iterdir())[0])
    assert main(["bench", "--model", model, "--eval-corpus", src, "--n-list", "4,8,16", "--g", "2",
                 "--depth", "4", "--report", report]) == EXIT_OK
    out = rows(report)
    pc = load_ply(src)
    tree = build_octree(quantize(pc, compute_bbox(pc), 4))
    for r in out:
        n = int(r["n"])
        expect = sum(len(slice_segments(tree.layer_size(i), n)) for i in range(1, 5))
        assert int(r["level_invocations"]) == expect
    assert [int(r["n"]) for r in out] == [4, 8, 16]


def test_config_file_and_overrides(corpus, tmp_path):
    cfg = tmp_path / "run.cfg"
    model = tmp_path / "c.octm"
    cfg.write_text(f"# training run\ncorpus = {corpus}\nmodel = {model}\nepochs = 3\ndepth = 4\nn = 32\n"
                   "g = 4\nm = 3\nd_model = 16\nheads = 2\nffn-mult = 2\nbatch_rows = 512\n")
    assert main(["train", "--config", str(cfg), "--epochs", "1"]) == EXIT_OK
    assert len(rows(str(model) + ".loss.csv")) == 1


def test_exit_codes(trained, corpus, tmp_path):
    _, model = trained
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochz = 3\n")
    assert main(["train", "--config", str(bad)]) == EXIT_USAGE
    assert main(["train"]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["encode", "--input", str(tmp_path / "missing.ply"), "--model", model]) == EXIT_DATA
    src = str(sorted(corpus.iterdir())[0])
    assert main(["decode", "--input", src, "--model", model]) == EXIT_DATA  # a PLY is not a bitstream
    assert main(["train", "--corpus", str(tmp_path)] + SMALL) == EXIT_DATA  # no .ply files
    assert main(["pretrain", "--corpus", str(corpus), "--model", str(tmp_path / "p.octm"), "--epochs", "1",
                 "--mask-prob", "0"] + SMALL) == EXIT_INTERNAL


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "octcodec.cli", "synth", "--count", "1", "--points", "10",
                        "--out-dir", str(tmp_path)], capture_output=True)
    assert r.returncode == 0 and len(os.listdir(tmp_path)) == 1
    r = subprocess.run([sys.executable, "-m", "octcodec.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "bench" in r.stdout
