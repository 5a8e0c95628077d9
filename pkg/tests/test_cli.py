"""Command-line pipeline, exit codes and reproducibility of result files."""
import csv
import glob
import os
import subprocess
import sys

import pytest

from affectfuse.cli import EVAL_HEADER, main, sweep_hash
from affectfuse.training import LOG_HEADER

TINY = """\
data.T = 6
data.dim_audio = 5
data.dim_visual = 6
data.dim_text = 4
data.n_train = 16
data.n_val = 8
data.n_test = 12
data.seed = 11
model.d = 8
model.n_layers = 1
model.n_heads = 2
model.head_dim = 4
model.d_ff = 8
model.t_max = 8
model.cmaa_dk = 4
model.mie_hidden = 4
model.cls_hidden = 8
train.epochs = 2
train.batch_size = 8
train.warmup_epochs = 1
train.decay_epochs = 2
harness.lipschitz_samples = 20
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    data = root / "data.afus"
    assert main(["generate-data", "--config", str(cfg), "--out", str(data)]) == 0
    runs = root / "runs"
    runs.mkdir()
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(runs), "--seed", "3"]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(runs), "--seed", "3",
                 "--variant", "no_mie"]) == 0
    ckpts = sorted(glob.glob(str(runs / "train_*_3.afus")))
    return root, cfg, data, runs, ckpts


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_no_arguments_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_module_entry_point_no_args():
    proc = subprocess.run([sys.executable, "-m", "affectfuse.cli"], capture_output=True, text=True)
    assert proc.returncode == 1


@pytest.mark.parametrize("argv", [
    ["bogus"], ["train"], ["--threads", "0", "check-theory", "fixed-point"],
    ["check-theory", "lipschitz"], ["eval", "--model", "x", "--data", "y", "--missing-rate", "2"],
])
def test_usage_errors(argv):
    assert main(argv) == 1


def test_bad_config_is_usage_error(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("model.n_heads = 3\n")
    assert main(["generate-data", "--config", str(cfg), "--out", str(tmp_path / "d.afus")]) == 1
    assert list(tmp_path.iterdir()) == [cfg]


def test_threads_env_validated(monkeypatch):
    monkeypatch.setenv("AFFECTFUSE_THREADS", "many")
    assert main(["check-theory", "fixed-point", "--trials", "2"]) == 1


def test_missing_file_is_data_error(tmp_path):
    assert main(["eval", "--model", str(tmp_path / "none.afus"), "--data", str(tmp_path / "d.afus"),
                 "--out", str(tmp_path)]) == 2
    assert list(tmp_path.iterdir()) == []


def test_train_outputs(pipeline):
    root, cfg, data, runs, ckpts = pipeline
    assert len(ckpts) == 2
    hist = read_csv(ckpts[0].replace(".afus", ".csv"))
    assert hist[0] == LOG_HEADER and len(hist) == 3
    assert os.path.exists(ckpts[0].replace(".afus", ".json"))


def test_eval_round_trip(pipeline, tmp_path):
    root, cfg, data, runs, ckpts = pipeline
    argv = ["eval", "--model", ckpts[0], "--data", str(data), "--missing-rate", "0.4", "--seed", "5",
            "--out", str(tmp_path)]
    assert main(argv) == 0
    (path,) = glob.glob(str(tmp_path / "eval_*_5.csv"))
    rows = read_csv(path)
    assert rows[0] == EVAL_HEADER and len(rows) == 2
    first = open(path, "rb").read()
    assert main(argv) == 0
    assert open(path, "rb").read() == first


def test_threads_do_not_change_results(pipeline, tmp_path):
    root, cfg, data, runs, ckpts = pipeline
    outs = []
    for threads in ("1", "8"):
        d = tmp_path / threads
        d.mkdir()
        assert main(["--threads", threads, "sweep-missing", "--models", f"a={ckpts[0]}", f"b={ckpts[1]}",
                     "--data", str(data), "--out", str(d)]) == 0
        (path,) = glob.glob(str(d / "sweep_*_0.csv"))
        outs.append(open(path, "rb").read())
    assert outs[0] == outs[1]
    assert read_csv(path)[0] == ["model", "rate", "accuracy", "macro_f1", "config_hash", "seed"]


def test_training_rerun_byte_identical(pipeline, tmp_path):
    root, cfg, data, runs, ckpts = pipeline
    assert main(["--threads", "4", "train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path),
                 "--seed", "3"]) == 0
    for ext in ("afus", "csv", "json"):
        (new,) = glob.glob(str(tmp_path / f"train_*_3.{ext}"))
        old = os.path.join(runs, os.path.basename(new))
        assert open(new, "rb").read() == open(old, "rb").read()


def test_trace_confidence(pipeline, tmp_path):
    root, cfg, data, runs, ckpts = pipeline
    assert main(["trace-confidence", "--model", ckpts[0], "--data", str(data), "--session", "2",
                 "--out", str(tmp_path)]) == 0
    (path,) = glob.glob(str(tmp_path / "trace-test-00002_*_3.csv"))
    rows = read_csv(path)
    assert len(rows) == 7 and rows[0][:4] == ["session", "step", "label", "prediction"]
    assert main(["trace-confidence", "--model", ckpts[0], "--data", str(data), "--session", "nope",
                 "--out", str(tmp_path)]) == 1


def test_ablate(pipeline, tmp_path, capsys):
    root, cfg, data, runs, ckpts = pipeline
    assert main(["ablate", "--config", str(cfg), "--data", str(data), "--seeds", "0,1",
                 "--variants", "full,no_tfl", "--out", str(tmp_path)]) == 0
    (path,) = glob.glob(str(tmp_path / "ablation_*_0-1.csv"))
    rows = read_csv(path)
    assert len(rows) == 5 and rows[0] == ["variant", "seed", "accuracy", "macro_f1", "best_epoch", "config_hash"]
    assert "Full Model" in capsys.readouterr().out


def test_check_theory_lipschitz_and_fixed_point(pipeline, tmp_path):
    root, cfg, data, runs, ckpts = pipeline
    assert main(["check-theory", "lipschitz", "--config", str(cfg), "--model", ckpts[0], "--data", str(data),
                 "--out", str(tmp_path)]) == 0
    (path,) = glob.glob(str(tmp_path / "theory-lipschitz_*.csv"))
    assert len(read_csv(path)) == 10
    assert main(["check-theory", "fixed-point", "--trials", "10", "--out", str(tmp_path)]) == 0
    assert main(["check-theory", "fixed-point", "--trials", "3", "--init-scale", "3"]) == 3


def test_corrupted_checkpoint_rejected_without_output(pipeline, tmp_path):
    root, cfg, data, runs, ckpts = pipeline
    bad = tmp_path / "bad.afus"
    raw = bytearray(open(ckpts[0], "rb").read())
    raw[100] ^= 0xFF
    bad.write_bytes(bytes(raw))
    out = tmp_path / "out"
    out.mkdir()
    assert main(["eval", "--model", str(bad), "--data", str(data), "--out", str(out)]) == 2
    assert list(out.iterdir()) == []


def test_mismatched_dataset_rejected(pipeline, tmp_path):
    root, cfg, data, runs, ckpts = pipeline
    other = tmp_path / "other.afus"
    assert main(["generate-data", "--config", str(cfg), "--set", "data.seed=12", "--out", str(other)]) == 0
    out = tmp_path / "out"
    out.mkdir()
    assert main(["sweep-missing", "--models", ckpts[0], "--data", str(other), "--out", str(out)]) == 2
    assert list(out.iterdir()) == []


def test_sweep_hash_order_independent():
    assert sweep_hash({"a": "1", "b": "2"}) == sweep_hash({"b": "2", "a": "1"})
    assert sweep_hash({"a": "1"}) != sweep_hash({"a": "2"})
