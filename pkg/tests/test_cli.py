import csv
import json

import numpy as np
import pytest

from prune_forge import cli
from prune_forge.pruning import PruningSchedule, sparsity_at
from prune_forge.sparse_model import SparseModel
from prune_forge.train import Checkpoint, write_container

TINY = """
[run]
seed = 1
steps = 60
batch_size = 16
eval_interval = 10

[model]
kind = mlp
input_dim = 8
hidden_widths = 16 16
output_dim = 4

[data]
seed = 2
teacher_widths = 32
n_train = 500
n_valid = 200

[optimizer]
kind = momentum

[lr]
lr = 0.05

[pruning]
s_f = 0.75
t0 = 10
n = 3
delta_t = 10
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_schedule_command(capsys, tmp_path):
    assert cli.main(["schedule", "--s-f", "0.875", "-n", "10", "--delta-t", "100", "--t0", "7", "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "step,sparsity"
    rows = [tuple(map(float, line.split(","))) for line in lines[1:]]
    assert len(rows) == 11 and rows[-1] == (1007.0, 0.875)
    assert all(a[1] <= b[1] for a, b in zip(rows, rows[1:]))
    sched = PruningSchedule(0.0, 0.875, 7, 10, 100)
    assert rows[5][1] == sparsity_at(sched, 507) == pytest.approx(0.875 * (1 - 0.5**3))
    assert (tmp_path / "schedule.png").stat().st_size > 0


def test_train_outputs_and_rerun_identical(tiny, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["train", "--config", str(tiny), "--out", str(a)]) == 0
    assert cli.main(["train", "--config", str(tiny), "--out", str(b)]) == 0
    rows = read_csv(a / "metrics.csv")
    assert list(rows[0])[:5] == ["step", "lr", "commanded_sparsity", "train_loss", "eval_metric"]
    assert rows[-1]["step"] == "60"
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "checkpoint.spz").read_bytes() == (b / "checkpoint.spz").read_bytes()
    assert (a / "trace.png").exists() and (a / "checkpoint.json").exists()
    manifest = json.loads((a / "checkpoint.json").read_text())
    assert "[pruning]" in manifest["config"]


def test_seed_flag_changes_run(tiny, tmp_path):
    cli.main(["train", "--config", str(tiny), "--out", str(tmp_path / "a")])
    cli.main(["train", "--config", str(tiny), "--seed", "9", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "checkpoint.spz").read_bytes() != (tmp_path / "b" / "checkpoint.spz").read_bytes()


def test_compress_reproduces_effective_weights(tiny, tmp_path):
    cli.main(["train", "--config", str(tiny), "--out", str(tmp_path)])
    ckpt = Checkpoint.load(tmp_path / "checkpoint.spz")
    for fmt in ("best", "bitmask", "csrc"):
        out = tmp_path / fmt
        assert cli.main(["compress", str(tmp_path / "checkpoint.spz"), "--format", fmt, "--out", str(out)]) == 0
        model = SparseModel.load(out / "model.spm")
        eff = ckpt.effective_weights()
        for name, arr in model.dense_tensors().items():
            assert arr.tobytes() == eff[name].tobytes()
        report = json.loads((out / "footprint.json").read_text())["model"]
        assert report["nnz"] == ckpt.manifest["final"]["nnz_params"]


def test_compress_dense_checkpoint_marks_overhead_na(tiny, tmp_path):
    cfg = tmp_path / "dense.ini"
    cfg.write_text(TINY.split("[pruning]")[0])
    cli.main(["train", "--config", str(cfg), "--out", str(tmp_path)])
    cli.main(["compress", str(tmp_path / "checkpoint.spz"), "--out", str(tmp_path)])
    rep = json.loads((tmp_path / "footprint.json").read_text())["model"]
    assert rep["payload_bytes"] == rep["total_params"] * 4 == rep["stored_total_bytes"]
    assert rep["bitmask_overhead_bytes"] is None and rep["csrc_overhead_bytes"] is None
    rows = read_csv(tmp_path / "footprint.csv")
    assert all(r["format"] == "dense" for r in rows)


def test_infer_matches_dense_path(tiny, tmp_path):
    cli.main(["train", "--config", str(tiny), "--out", str(tmp_path)])
    cli.main(["compress", str(tmp_path / "checkpoint.spz"), "--format", "csrc", "--out", str(tmp_path)])
    x = np.random.default_rng(0).normal(size=(30, 8)).astype(np.float32)
    np.savetxt(tmp_path / "x.csv", x, delimiter=",")
    assert cli.main(["infer", str(tmp_path / "model.spm"), str(tmp_path / "x.csv"), "--out", str(tmp_path)]) == 0
    timing = json.loads((tmp_path / "timing.json").read_text())
    assert timing["agree"] and timing["max_rel_diff"] <= 1e-5 and timing["n_inputs"] == 30
    assert len(read_csv(tmp_path / "outputs.csv")) == 30


def test_infer_fully_masked_model_is_uniform(tiny, tmp_path):
    cli.main(["train", "--config", str(tiny), "--out", str(tmp_path)])
    ckpt = Checkpoint.load(tmp_path / "checkpoint.spz")
    for k in ckpt.masks:
        ckpt.masks[k][...] = False
    for k, v in ckpt.tensors.items():
        if k not in ckpt.masks:
            v[...] = 0
    ckpt.save(tmp_path / "masked.spz")
    cli.main(["compress", str(tmp_path / "masked.spz"), "--out", str(tmp_path / "m")])
    np.save(tmp_path / "x.npy", np.ones((5, 8), dtype=np.float32))
    assert cli.main(["infer", str(tmp_path / "m" / "model.spm"), str(tmp_path / "x.npy")]) == 0
    probs = np.load(tmp_path / "m" / "probabilities.npy")
    assert np.allclose(probs, 0.25, rtol=0, atol=1e-12)


def test_compare_degenerate_sweep(tiny, tmp_path):
    cfg = tmp_path / "sweep.ini"
    cfg.write_text(TINY + "\n[sweep]\nseeds = 4\ndense = 1.0\n")
    assert cli.main(["compare", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "runs.csv")
    summary = read_csv(tmp_path / "summary.csv")
    assert len(rows) == 1 and len(summary) == 1
    assert summary[0]["metric_std"] == "0.0" and summary[0]["n_seeds"] == "1"
    assert (tmp_path / "sweep.png").exists()


def test_compare_matched_variant_and_reproducible(tiny, tmp_path):
    cfg = tmp_path / "sweep.ini"
    cfg.write_text(TINY + "\n[sweep]\nseeds = 0 1\ndense = matched\nsparse = 0.75\n")
    cli.main(["compare", "--config", str(cfg), "--out", str(tmp_path / "a")])
    cli.main(["compare", "--config", str(cfg), "--out", str(tmp_path / "b")])
    for name in ("runs.csv", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = read_csv(tmp_path / "a" / "runs.csv")
    dense = [r for r in rows if r["kind"] == "dense"]
    sparse = [r for r in rows if r["kind"] == "sparse"]
    assert len(dense) == len(sparse) == 2
    d, s = int(dense[0]["nnz_params"]), int(sparse[0]["nnz_params"])
    assert s <= d <= 1.1 * s


def test_compare_with_worker_processes(tiny, tmp_path, monkeypatch):
    cfg = tmp_path / "sweep.ini"
    cfg.write_text(TINY + "\n[sweep]\nseeds = 0 1\ndense = 0.5\n")
    cli.main(["compare", "--config", str(cfg), "--out", str(tmp_path / "serial")])
    monkeypatch.setenv("PRUNE_FORGE_THREADS", "2")
    cli.main(["compare", "--config", str(cfg), "--threads", "1", "--out", str(tmp_path / "pool")])
    assert (tmp_path / "serial" / "runs.csv").read_bytes() == (tmp_path / "pool" / "runs.csv").read_bytes()


def test_threads_resolution(monkeypatch):
    monkeypatch.delenv("PRUNE_FORGE_THREADS", raising=False)
    assert cli.resolve_threads(None) == 1
    assert cli.resolve_threads(3) == 3
    monkeypatch.setenv("PRUNE_FORGE_THREADS", "5")
    assert cli.resolve_threads(3) == 5


def test_footprint_command(capsys):
    assert cli.main(["footprint", "--total", "4210000", "--nnz", "4210000", "2130000"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    dense, sparse = lines[1].split(","), lines[2].split(",")
    assert dense[4] == "N/A" and dense[-1] == "dense"
    assert float(sparse[6]) == pytest.approx(9.04, abs=0.01)


def test_exit_codes(tiny, tmp_path, monkeypatch):
    assert cli.main(["train", "--config", str(tmp_path / "missing.ini")]) == cli.EXIT_IO
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nkind = cnn\n")
    assert cli.main(["train", "--config", str(bad)]) == cli.EXIT_CONFIG
    boom = tmp_path / "boom.ini"
    boom.write_text(TINY.replace("lr = 0.05", "lr = 1e30").split("[pruning]")[0])
    with np.errstate(all="ignore"):
        assert cli.main(["train", "--config", str(boom), "--out", str(tmp_path / "x")]) == cli.EXIT_DIVERGED
    junk = tmp_path / "junk.spz"
    junk.write_bytes(b"garbage")
    assert cli.main(["compress", str(junk)]) == cli.EXIT_IO
    write_container(tmp_path / "empty.spz", [])
    assert cli.main(["compress", str(tmp_path / "empty.spz")]) == cli.EXIT_IO
    monkeypatch.setenv("PRUNE_FORGE_THREADS", "zero")
    assert cli.main(["schedule"]) == cli.EXIT_CONFIG
    with pytest.raises(SystemExit) as info:
        cli.main(["nonsense"])
    assert info.value.code == 2
