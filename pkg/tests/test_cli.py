import subprocess
import sys

import numpy as np
import pytest

from fpdmnet.cli import build_parser, run
from fpdmnet.imageio import read_u8, write_u8
from fpdmnet.metrics import MetricsReport
from fpdmnet.training import TrainLog, load_checkpoint


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["generate-data", "--out", str(root / "d"), "--count", "4", "--seed", "7"]) == 0
    code = run(["train", "--data", str(root / "d"), "--arch", "mnet-b", "--depth", "2", "--base", "8",
                "--epochs", "3", "--batch", "2", "--seed", "1", "--out", str(root / "run"), "--quiet"])
    assert code == 0
    return root


def test_generate_data_outputs(workspace):
    files = sorted(p.name for p in (workspace / "d").iterdir())
    assert sum(f.endswith(".pgm") for f in files) == 8
    assert "manifest.csv" in files


def test_train_outputs(workspace):
    run_dir = workspace / "run"
    assert sorted(p.name for p in run_dir.glob("*.fpdm")) == ["epoch_0001.fpdm", "epoch_0002.fpdm", "epoch_0003.fpdm"]
    log = TrainLog.from_csv(run_dir / "train_log.csv")
    assert len(log.rows) == 6
    cfg = load_checkpoint(run_dir / "epoch_0003.fpdm").model_config
    assert (cfg.arch, cfg.bn_order, cfg.depth, cfg.base) == ("fpd-mnet", "before", 2, 8)


def test_infer_file_and_directory(workspace, tmp_path):
    src = sorted((workspace / "d").glob("*_distorted.pgm"))
    assert run(["infer", "--model", str(workspace / "run"), "--input", str(src[0]), "--output", str(tmp_path / "one")]) == 0
    out = tmp_path / "one" / src[0].name
    assert read_u8(out).shape == read_u8(src[0]).shape

    batch = tmp_path / "in"
    batch.mkdir()
    for p in src[:3]:
        (batch / p.name).write_bytes(p.read_bytes())
    ckpt = str(workspace / "run" / "epoch_0003.fpdm")
    assert run(["infer", "--model", ckpt, "--input", str(batch), "--output", str(tmp_path / "a")]) == 0
    assert run(["infer", "--model", ckpt, "--input", str(batch), "--output", str(tmp_path / "b")]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(names) == 3
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_infer_odd_sized_image(workspace, tmp_path):
    write_u8(np.random.default_rng(0).integers(0, 256, (37, 51), dtype=np.uint8), tmp_path / "odd.png")
    assert run(["infer", "--model", str(workspace / "run"), "--input", str(tmp_path / "odd.png"),
                "--output", str(tmp_path / "o")]) == 0
    assert read_u8(tmp_path / "o" / "odd.png").shape == (37, 51)


def test_evaluate_identity(workspace, tmp_path):
    d = str(workspace / "d")
    assert run(["evaluate", "--pred", d, "--ref", d, "--out", str(tmp_path / "r.csv")]) == 0
    report = MetricsReport.from_csv(tmp_path / "r.csv")
    assert len(report.rows) == 8
    assert report.mean.mse == 0 and report.mean.ssim == pytest.approx(1.0)


def test_evaluate_model_on_dataset(workspace, tmp_path, capsys):
    assert run(["evaluate", "--model", str(workspace / "run"), "--data", str(workspace / "d")]) == 0
    assert "mean" in capsys.readouterr().out


def test_evaluate_usage_errors(workspace):
    assert run(["evaluate", "--pred", str(workspace / "d")]) == 1
    assert run(["evaluate"]) == 1


def test_gradcheck_commands(capsys):
    assert run(["gradcheck", "--op", "sigmoid"]) == 0
    assert "PASS" in capsys.readouterr().out
    assert run(["gradcheck", "--op", "nope"]) == 1
    assert "usage" in capsys.readouterr().err
    assert run(["gradcheck", "--list"]) == 0
    assert "model_mnet_b" in capsys.readouterr().out


def test_summary(capsys):
    assert run(["summary", "--depth", "2", "--base", "4"]) == 0
    out = capsys.readouterr().out
    assert "total parameters: 11463" in out and "368x496" in out
    assert run(["summary", "--depth", "5", "--base", "2"]) == 0
    assert "288x416" in capsys.readouterr().out


def test_usage_errors():
    assert run([]) == 1
    assert run(["bogus"]) == 1
    assert run(["generate-data"]) == 1  # missing --out
    assert run(["generate-data", "--out", "x", "--frobnicate"]) == 1
    assert run(["train", "--data", "d", "--out", "r", "--arch", "resnet"]) == 1
    assert run(["summary", "--depth", "-1"]) == 1


def test_runtime_failure_exit_code(tmp_path):
    assert run(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == 2
    (tmp_path / "junk.fpdm").write_bytes(b"nope")
    assert run(["infer", "--model", str(tmp_path / "junk.fpdm"), "--input", str(tmp_path), "--output", str(tmp_path / "o")]) == 2


def test_help_on_every_subcommand(capsys):
    parser = build_parser()
    commands = parser._subparsers._group_actions[0].choices
    for name, sub in commands.items():
        assert run([name, "--help"]) == 0
        out = capsys.readouterr().out
        for action in sub._actions:
            for flag in action.option_strings:
                assert flag in out, (name, flag)
    assert run(["--help"]) == 0


def test_config_file_and_override(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# summary settings\ndepth = 2\nbase = 4\narch = unet\n")
    assert run(["summary", "--config", str(cfg)]) == 0
    assert "unet depth=2 base=4" in capsys.readouterr().out
    assert run(["summary", "--config", str(cfg), "--base", "2", "--arch", "mnet-a"]) == 0
    assert "fpd-mnet depth=2 base=2 bn_order=after" in capsys.readouterr().out


def test_config_file_supplies_required_flags(tmp_path):
    cfg = tmp_path / "g.cfg"
    cfg.write_text(f"out = {tmp_path / 'gen'}\ncount = 1\nseed = 3\n")
    assert run(["generate-data", "--config", str(cfg)]) == 0
    assert len(list((tmp_path / "gen").glob("*.pgm"))) == 2


def test_config_file_errors(tmp_path):
    bad_key = tmp_path / "k.cfg"
    bad_key.write_text("colour = blue\n")
    assert run(["summary", "--config", str(bad_key)]) == 1
    bad_value = tmp_path / "v.cfg"
    bad_value.write_text("depth = two\n")
    assert run(["summary", "--config", str(bad_value)]) == 1
    assert run(["summary", "--config", str(tmp_path / "absent.cfg")]) == 1


def test_thread_cap_env(monkeypatch):
    monkeypatch.setenv("FPDM_THREADS", "1")
    assert run(["summary", "--depth", "1", "--base", "1"]) == 0
    monkeypatch.setenv("FPDM_THREADS", "zero")
    assert run(["summary", "--depth", "1", "--base", "1"]) == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "fpdmnet", "gradcheck", "--list"], capture_output=True, text=True)
    assert proc.returncode == 0 and "conv2d" in proc.stdout
