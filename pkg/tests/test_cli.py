import os
import subprocess
import sys

import numpy as np
import pytest

from drwkv import cli
from drwkv.backbone import ConfigError, DiffusionRWKV
from drwkv.checkpoint import checkpoint_load
from drwkv.config import RunConfig, parse_run_config
from drwkv.data import encode_pixmap
from drwkv.diffusion import SamplerConfig, linear_schedule, sample_loop

TINY = """\
# tiny desk model
seed = 3
model.L = 3
model.D = 16
model.E = 2
model.H = 8
model.W = 8
model.C = 1
model.num_classes = 2
data.n = 64
train.steps = 12
train.batch_size = 4
train.lr = 0.001
train.log_interval = 2
train.save_interval = 6
"""


def write(path, text):
    path.write_text(text)
    return str(path)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = write(d / "tiny.cfg", TINY)
    assert cli.main(["train", "--config", cfg, "--out", str(d / "out")]) == 0
    return d / "out"


def test_parse_config_and_reject_unknown():
    cfg = parse_run_config(TINY)
    assert cfg.model.D == 16 and cfg.train.steps == 12 and cfg.seed == 3 and cfg.train.lr == 1e-3
    assert parse_run_config("model.preset = B\nmodel.H = 8\nmodel.W = 8").model.D == 768
    assert parse_run_config("model.preset = S\nmodel.L = 3").model.L == 3
    assert parse_run_config("train.time_budget =").train.time_budget is None
    for bad in ("model.depth = 3", "nokey", "train.steps = many", "model.preset = Q", "trainer.lr = 1"):
        with pytest.raises(ConfigError):
            parse_run_config(bad)
    text = RunConfig().to_text()
    assert parse_run_config(text) == RunConfig()


def test_train_writes_checkpoints_metrics_and_config(tiny_run):
    files = sorted(os.listdir(tiny_run))
    assert "ckpt_000006.drwk" in files and "ckpt_000012.drwk" in files
    assert "config.txt" in files and "metrics.csv" in files
    lines = (tiny_run / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,loss,mse,vlb,lr,ema_decay" and len(lines) == 7
    echoed = parse_run_config((tiny_run / "config.txt").read_text())
    assert echoed.model.D == 16 and echoed.out == str(tiny_run)


def test_same_seed_gives_identical_metrics(tiny_run, tmp_path):
    cfg = write(tmp_path / "tiny.cfg", TINY)
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "metrics.csv").read_bytes() == (tiny_run / "metrics.csv").read_bytes()


def test_resume_from_checkpoint(tiny_run, tmp_path):
    cfg = write(tmp_path / "tiny.cfg", TINY)
    out = tmp_path / "resumed"
    ck = str(tiny_run / "ckpt_000006.drwk")
    assert cli.main(["train", "--config", cfg, "--out", str(out), "--checkpoint", ck]) == 0
    a = checkpoint_load(str(out / "ckpt_000012.drwk"))
    b = checkpoint_load(str(tiny_run / "ckpt_000012.drwk"))
    assert all(np.array_equal(a.model[n], b.model[n]) for n in a.model)


def test_missing_dataset_fails_without_touching_output(tmp_path, capsys):
    cfg = write(tmp_path / "c.cfg", TINY + "data.source = cifar10\ndata.path = /nonexistent/cifar\n")
    out = tmp_path / "never"
    assert cli.main(["train", "--config", cfg, "--out", str(out)]) != 0
    assert not out.exists()
    assert "does not exist" in capsys.readouterr().err


def test_resume_config_clash_fails_before_output(tmp_path):
    cfg = write(tmp_path / "c.cfg", TINY.replace("model.C = 1", "model.C = 3") + "data.n = 8\n")
    out = tmp_path / "o"
    assert cli.main(["train", "--config", cfg, "--out", str(out), "--steps", "1"]) == 0
    tiny = write(tmp_path / "t.cfg", TINY)
    assert cli.main(["train", "--config", tiny, "--out", str(tmp_path / "x"),
                     "--checkpoint", str(out / "ckpt_000001.drwk")]) != 0
    assert not (tmp_path / "x").exists()


def read_samples(d):
    return sorted(f for f in os.listdir(d) if f.startswith("sample_"))


def test_sample_writes_n_images_and_manifest(tiny_run, tmp_path):
    ck = str(tiny_run / "ckpt_000012.drwk")
    out = tmp_path / "s"
    assert cli.main(["sample", "--checkpoint", ck, "-n", "4", "--steps", "10", "--seed", "5", "--out", str(out)]) == 0
    assert read_samples(out) == [f"sample_{i:04d}.pgm" for i in range(4)]
    manifest = (out / "manifest.txt").read_text()
    assert "seed=5" in manifest and "steps=10" in manifest and manifest.count("image=") == 4
    again = tmp_path / "s2"
    assert cli.main(["sample", "--checkpoint", ck, "-n", "4", "--steps", "10", "--seed", "5", "--out", str(again)]) == 0
    for f in read_samples(out):
        assert (out / f).read_bytes() == (again / f).read_bytes()


def test_guidance_one_equals_conditional_pass(tiny_run, tmp_path):
    ck_path = str(tiny_run / "ckpt_000012.drwk")
    out = tmp_path / "g"
    assert cli.main(["sample", "--checkpoint", ck_path, "-n", "2", "--steps", "8", "--guidance", "1",
                     "--class", "1", "--seed", "2", "--out", str(out)]) == 0
    ck = checkpoint_load(ck_path)
    model = DiffusionRWKV(ck.config)
    model.load_arrays(ck.ema)
    labels = np.array([1, 1])
    conditional = lambda x, t, c: model.predict(x, t, labels)
    x = sample_loop(conditional, (2, 1, 8, 8), None, SamplerConfig(8, 1.0, "learned", 2), linear_schedule())
    for i in range(2):
        assert (out / f"sample_{i:04d}.pgm").read_bytes() == encode_pixmap(x[i])


def test_sample_errors(tiny_run, tmp_path):
    bad = tmp_path / "bad.drwk"
    bad.write_bytes(b"DRWK" + b"\x00" * 10)
    assert cli.main(["sample", "--checkpoint", str(bad), "-n", "1"]) != 0
    ck = str(tiny_run / "ckpt_000012.drwk")
    assert cli.main(["sample", "--checkpoint", ck, "-n", "1", "--class", "7"]) != 0


def test_verify_lists_suites_and_fault_fails(capsys):
    assert cli.main(["verify", "--suite", "kernel-oracle,schedule,init-identities"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") >= 3
    assert cli.main(["verify", "--suite", "kernel-oracle", "--inject-fault", "wkv-sign"]) == 1
    assert "FAIL" in capsys.readouterr().out
    assert cli.main(["verify", "--suite", "nonsense"]) == 2
    from drwkv.verify import SUITES
    assert len(SUITES) >= 6


def test_flops_prints_references(capsys):
    assert cli.main(["flops"]) == 0
    out = capsys.readouterr().out
    for ref in ("1.72", "3.32", "5.90", "19.65", "34.95"):
        assert f"{ref} Gflops" in out
    assert cli.main(["flops", "--preset", "S", "--H", "32", "--W", "32"]) == 0
    assert "1,277,952" in capsys.readouterr().out


def test_bench_csv_rows(tmp_path, capsys):
    out = tmp_path / "b.csv"
    assert cli.main(["bench", "--J", "16,32,64", "--D", "8", "--repeats", "1", "--no-assert", "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "J,scan_ns,oracle_ns" and [r.split(",")[0] for r in rows[1:]] == ["16", "32", "64"]
    assert cli.main(["bench", "--J", "64,32", "--no-assert"]) == 2


def test_console_script_runs():
    r = subprocess.run([sys.executable, "-m", "drwkv.cli", "flops", "--preset", "H"],
                       capture_output=True, text=True, env={**os.environ, "DRWKV_THREADS": "1"})
    assert r.returncode == 0 and "34.95 Gflops" in r.stdout


def test_smoke_train_s_config(tmp_path):
    # the S preset at 8x8 with the default two-blob set; a small batch keeps it to a few minutes
    cfg = write(tmp_path / "s.cfg", "model.preset = S\nmodel.H = 8\nmodel.W = 8\nmodel.C = 1\n"
                                   "model.num_classes = 2\ntrain.steps = 200\ntrain.batch_size = 4\n"
                                   "train.save_interval = 100\ntrain.log_interval = 20\n")
    out = tmp_path / "smoke"
    assert cli.main(["train", "--config", cfg, "--out", str(out)]) == 0
    ckpts = [f for f in os.listdir(out) if f.endswith(".drwk")]
    assert len(ckpts) >= 1
    assert checkpoint_load(str(out / "ckpt_000200.drwk")).config.D == 384
