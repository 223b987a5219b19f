import io
import subprocess
import sys
from pathlib import Path

import pytest

from pggcn.cli import build_parser, main, parse_synthetic
from pggcn.exceptions import ConfigurationError

FIXTURES = Path(__file__).parent / "fixtures"
SMALL = ["--synthetic", "3x4", "--joints", "5", "--frames", "8", "--embed-channels", "4,4,4",
         "--classifier-channels", "4,8", "--batch-size", "4", "--lr", "0.05"]


def run(*argv):
    out = io.StringIO()
    code = main([str(a) for a in argv], out)
    return code, out.getvalue()


def test_help_lists_every_flag():
    text = build_parser()._subparsers._group_actions[0].choices["train"].format_help()
    for flag in ("--workdir", "--config", "--seed", "--workers", "--data-dir", "--benchmark",
                 "--cache-dir", "--synthetic", "--joints", "--frames", "--pose-noise",
                 "--graph-file", "--streams", "--attention", "--embed-channels",
                 "--classifier-channels", "--temporal-kernel", "--epochs", "--lr",
                 "--batch-size", "--weight-decay", "--momentum", "--schedule", "--log",
                 "--checkpoint"):
        assert flag in text, flag


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "pggcn.cli", "--help"], capture_output=True,
                          text=True)
    assert proc.returncode == 0
    for cmd in ("train", "eval", "gradcheck", "synth", "parse-check", "confusion"):
        assert cmd in proc.stdout


def test_unknown_flag_is_usage_error(capsys):
    assert run("train", "--bogus")[0] == 2


def test_missing_checkpoint_exits_1(tmp_path, capsys):
    code, _ = run("eval", "--workdir", tmp_path, "--checkpoint", "missing.ckpt",
                  "--synthetic", "3x4")
    assert code == 1
    assert "missing.ckpt" in capsys.readouterr().err


def test_parse_synthetic():
    assert parse_synthetic("4x50") == (4, 50)
    with pytest.raises(ConfigurationError):
        parse_synthetic("four")


def test_train_eval_confusion(tmp_path):
    code, text = run("train", "--workdir", tmp_path, "--epochs", "2", *SMALL)
    assert code == 0, text
    for name in ("train_log.csv", "model.ckpt", "confusion.csv", "confusion_normalized.csv"):
        assert (tmp_path / name).exists(), name
    lines = (tmp_path / "train_log.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,train_acc,eval_acc" and len(lines) == 3

    code, text = run("eval", "--workdir", tmp_path, "--checkpoint", "model.ckpt", *SMALL[:6])
    assert code == 0 and text.startswith("top1 ")

    code, text = run("confusion", "--workdir", tmp_path, "--checkpoint", "model.ckpt",
                     "--output", "out/cm.csv", *SMALL[:6])
    assert code == 0
    rows = (tmp_path / "out" / "cm.csv").read_text().splitlines()
    assert len(rows) == 3 and all(len(r.split(",")) == 3 for r in rows)


def test_training_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run("train", "--workdir", tmp_path / name, "--epochs", "2", "--seed", "4",
                   *SMALL)[0] == 0
    for f in ("train_log.csv", "model.ckpt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_config_file_precedence(tmp_path):
    (tmp_path / "run.cfg").write_text("epochs = 3\nlr = 0.05\nseed = 2\n")
    args = ["train", "--workdir", tmp_path, "--config", "run.cfg", *SMALL]
    assert run(*args)[0] == 0
    assert len((tmp_path / "train_log.csv").read_text().splitlines()) == 4
    assert run(*args, "--epochs", "1")[0] == 0
    assert len((tmp_path / "train_log.csv").read_text().splitlines()) == 2


def test_unknown_config_key(tmp_path, capsys):
    (tmp_path / "run.cfg").write_text("epochz = 3\n")
    assert run("train", "--workdir", tmp_path, "--config", "run.cfg", *SMALL)[0] == 1


def test_custom_graph_file(tmp_path):
    (tmp_path / "g.txt").write_text("5\n0 1\n1 2\n2 3\n3 4\n")
    code, text = run("train", "--workdir", tmp_path, "--graph-file", "g.txt", "--epochs", "1",
                     *SMALL)
    assert code == 0, text


def test_synth_then_train_from_cache(tmp_path):
    assert run("synth", "--workdir", tmp_path, "--synthetic", "3x4", "--joints", "5",
               "--frames", "8", "--cache-dir", "cache")[0] == 0
    assert (tmp_path / "cache" / "manifest.txt").exists()
    assert run("train", "--workdir", tmp_path, "--cache-dir", "cache", "--epochs", "1",
               *SMALL[6:])[0] == 0


def test_parse_check(tmp_path):
    code, text = run("parse-check", "--data-dir", FIXTURES)
    assert code == 0 and "1/1 files ok" in text
    code, text = run("parse-check", "--data-dir", FIXTURES / "bad")
    assert code == 1 and "unexpected end of file" in text


def test_no_data_source(tmp_path, capsys):
    assert run("train", "--workdir", tmp_path)[0] == 1
    assert "no data source" in capsys.readouterr().err


@pytest.mark.slow
def test_gradcheck_command():
    code, text = run("gradcheck", "--seed", "7")
    assert code == 0, text
    assert "all suites pass" in text
