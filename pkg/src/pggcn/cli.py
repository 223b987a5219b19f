"""Command-line entry point: ``pggcn <command> [flags]``.

Commands: train, eval, gradcheck, synth, parse-check, confusion.  Settings
resolve as built-in defaults < ``--config`` file (``key = value`` lines,
keys named like the long flags with dashes or underscores) < flags.  Relative
paths are taken relative to ``--workdir``.  Exit status: 0 success, 1 runtime
failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .data import check_directory, generate_synthetic, load_ntu, read_cache, write_cache
from .exceptions import ConfigurationError, PGGCNError
from .graph import read_graph_file
from .model import PGGCNConfig, PGGCNModel, load_checkpoint, parse_key_values
from .train import TrainConfig, evaluate, train_loop

DEFAULTS = {
    "workdir": ".",
    "data_dir": None,
    "cache_dir": None,
    "benchmark": "xsub",
    "streams": "both",
    "attention": "dynamic",
    "epochs": 200,
    "lr": 0.1,
    "batch_size": 16,
    "weight_decay": 1e-4,
    "momentum": 0.0,
    "schedule": "step",
    "seed": 0,
    "checkpoint": None,
    "synthetic": None,
    "workers": 1,
    "joints": 11,
    "frames": 32,
    "pose_noise": 0.01,
    "embed_channels": "64,64,64",
    "classifier_channels": "128,256",
    "temporal_kernel": 9,
    "graph_file": None,
    "log": "train_log.csv",
    "output": "confusion.csv",
    "config": None,
}


def parse_synthetic(spec: str):
    m = re.fullmatch(r"\s*(\d+)\s*[x×X]\s*(\d+)\s*", spec)
    if not m:
        raise ConfigurationError(f"--synthetic expects CxS (e.g. 4x50), got {spec!r}")
    return int(m.group(1)), int(m.group(2))


def _channels(text):
    return tuple(int(c) for c in str(text).split(","))


def _add(parser, *names, **kw):
    kw.setdefault("default", None)
    dest = names[0].lstrip("-").replace("-", "_")
    if "help" in kw and DEFAULTS.get(dest) is not None:
        kw["help"] += f" (default: {DEFAULTS[dest]})"
    parser.add_argument(*names, **kw)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    _add(common, "--workdir", help="directory that relative paths are resolved against")
    _add(common, "--config", help="settings file with 'key = value' lines")
    _add(common, "--seed", type=int, help="seed for initialization, shuffling and synthetic data")
    _add(common, "--workers", type=int, help="processes used for parsing data files")

    data = argparse.ArgumentParser(add_help=False)
    _add(data, "--data-dir", help="directory of NTU .skeleton files")
    _add(data, "--benchmark", help="xsub, xview, xsub120 or xset120")
    _add(data, "--cache-dir", help="preprocessed dataset cache directory")
    _add(data, "--synthetic", metavar="CxS", help="synthetic dataset: C classes x S samples each")
    _add(data, "--joints", type=int, help="joints of synthetic skeletons")
    _add(data, "--frames", type=int, help="frames of synthetic clips")
    _add(data, "--pose-noise", type=float, help="std of noise added to synthetic pose")
    _add(data, "--graph-file", help="custom skeleton graph: 'N' then 'i j' edge lines")

    model = argparse.ArgumentParser(add_help=False)
    _add(model, "--streams", choices=("pose", "skeleton", "both"), help="input streams")
    _add(model, "--attention", choices=("none", "vanilla", "dynamic"),
         help="pose-guided fusion mode (none = concatenation)")
    _add(model, "--embed-channels", help="widths of the three embedding blocks")
    _add(model, "--classifier-channels", help="widths of the two classifier blocks")
    _add(model, "--temporal-kernel", type=int, help="temporal convolution kernel size")

    opt = argparse.ArgumentParser(add_help=False)
    _add(opt, "--epochs", type=int, help="training epochs")
    _add(opt, "--lr", type=float, help="initial learning rate")
    _add(opt, "--batch-size", type=int, help="mini-batch size")
    _add(opt, "--weight-decay", type=float, help="L2 weight decay on weight tensors")
    _add(opt, "--momentum", type=float, help="SGD momentum")
    _add(opt, "--schedule", choices=("step", "constant"),
         help="learning-rate schedule (step: x0.1 at 60%% and 80%% of epochs)")
    _add(opt, "--log", help="training log CSV")

    ckpt = argparse.ArgumentParser(add_help=False)
    _add(ckpt, "--checkpoint", help="checkpoint file")

    parser = argparse.ArgumentParser(prog="pggcn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    sub.add_parser("train", parents=[common, data, model, opt, ckpt],
                   help="train a model; writes log, checkpoint and confusion matrix")
    sub.add_parser("eval", parents=[common, data, ckpt], help="evaluate a checkpoint")
    sub.add_parser("gradcheck", parents=[common], help="run the finite-difference suite")
    sub.add_parser("synth", parents=[common, data], help="write a synthetic dataset cache")
    sub.add_parser("parse-check", parents=[common, data], help="validate a data directory")
    conf = sub.add_parser("confusion", parents=[common, data, ckpt],
                          help="export the confusion matrix of a checkpoint")
    _add(conf, "--output", help="confusion CSV path (a _normalized variant is written too)")
    return parser


class Settings:
    """Flag values merged with the config file and defaults."""

    def __init__(self, ns):
        self._ns = vars(ns)
        self._file = {}
        if self._ns.get("config"):
            path = Path(self._ns["config"])
            if not path.is_absolute() and self._ns.get("workdir"):
                path = Path(self._ns["workdir"]) / path
            raw = parse_key_values(path.read_text())
            self._file = {k.replace("-", "_"): v for k, v in raw.items()}
            unknown = set(self._file) - set(DEFAULTS)
            if unknown:
                raise ConfigurationError(f"unknown config keys {sorted(unknown)}")

    def __getattr__(self, key):
        val = self._ns.get(key)
        if val is not None:
            return val
        if key in self._file:
            default = DEFAULTS[key]
            raw = self._file[key]
            return type(default)(raw) if default is not None else raw
        return DEFAULTS[key]

    def path(self, key):
        val = getattr(self, key)
        if val is None:
            return None
        p = Path(val)
        return p if p.is_absolute() else Path(self.workdir) / p


def _graph_kwargs(s: Settings):
    if s.graph_file is None:
        return {}
    g = read_graph_file(s.path("graph_file"))
    return {"graph_edges": g.edges, "num_joints": g.num_joints, "center_joint": g.center_joint}


def load_data(s: Settings, need_train=True):
    """Return ``(train_set, eval_set)`` from the configured source."""
    if s.synthetic:
        classes, per = parse_synthetic(s.synthetic)
        joints = s.joints
        if s.graph_file is not None:
            joints = _graph_kwargs(s)["num_joints"]
        kw = dict(num_joints=joints, num_frames=s.frames, pose_noise=s.pose_noise)
        train = generate_synthetic(classes, per, seed=s.seed, **kw)
        held_out = generate_synthetic(classes, max(2, per // 5), seed=s.seed + 1,
                                      name_prefix="syneval", **kw)
        return train, held_out
    if s.cache_dir is not None:
        ds = read_cache(s.path("cache_dir"))
        return ds, ds
    if s.data_dir is not None:
        train, test, _ = load_ntu(s.path("data_dir"), s.benchmark, workers=s.workers)
        if need_train and train is None:
            raise ConfigurationError("the split left no training clips")
        return train, test
    raise ConfigurationError("no data source: give --synthetic, --cache-dir or --data-dir")


def cmd_train(s: Settings, out):
    train_set, eval_set = load_data(s)
    cfg = PGGCNConfig(
        num_classes=train_set.num_classes, num_joints=train_set.skeleton.shape[2],
        max_frames=train_set.skeleton.shape[1], embed_channels=_channels(s.embed_channels),
        classifier_channels=_channels(s.classifier_channels),
        temporal_kernel=s.temporal_kernel, attention=s.attention, streams=s.streams,
        seed=s.seed, **{k: v for k, v in _graph_kwargs(s).items() if k != "num_joints"})
    tcfg = TrainConfig(learning_rate=s.lr, batch_size=s.batch_size,
                       weight_decay=s.weight_decay, epochs=s.epochs, schedule=s.schedule,
                       momentum=s.momentum, seed=s.seed)
    workdir = Path(s.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    ckpt = s.path("checkpoint") or workdir / "model.ckpt"
    model = PGGCNModel(cfg)
    result = train_loop(model, train_set, tcfg, eval_set, s.path("log"), ckpt)
    last = result.history[-1]
    print(f"epochs {len(result.history)}  final loss {last.loss:.4f}  "
          f"train acc {last.train_acc:.4f}  eval acc {last.eval_acc:.4f}", file=out)
    print(f"best epoch {result.best_epoch}  checkpoint {ckpt}", file=out)
    if eval_set is not None:
        best = load_checkpoint(ckpt)
        cm = evaluate(best, eval_set).confusion
        cm.save(workdir / "confusion.csv")
    return 0


def _load_model(s: Settings):
    path = s.path("checkpoint")
    if path is None:
        raise ConfigurationError("--checkpoint is required")
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_eval(s: Settings, out):
    model = _load_model(s)
    _, eval_set = load_data(s, need_train=False)
    if eval_set is None:
        raise ConfigurationError("the split left no evaluation clips")
    res = evaluate(model, eval_set)
    print(f"top1 {res.top1:.6f}  ({int(np.trace(res.confusion.counts))}/{res.confusion.total})",
          file=out)
    return 0


def cmd_confusion(s: Settings, out):
    model = _load_model(s)
    _, eval_set = load_data(s, need_train=False)
    res = evaluate(model, eval_set)
    path = s.path("output")
    path.parent.mkdir(parents=True, exist_ok=True)
    res.confusion.save(path)
    print(f"wrote {path} (top1 {res.top1:.6f})", file=out)
    return 0


def cmd_gradcheck(s: Settings, out):
    results = gradcheck.run_all(s.seed)
    print(gradcheck.format_table(results), file=out)
    ok = all(r.passed for r in results)
    print("all suites pass" if ok else "gradient check FAILED", file=out)
    return 0 if ok else 1


def cmd_synth(s: Settings, out):
    if not s.synthetic:
        raise ConfigurationError("synth needs --synthetic CxS")
    if s.cache_dir is None:
        raise ConfigurationError("synth needs --cache-dir")
    train, _ = load_data(s)
    write_cache(s.path("cache_dir"), train, {"seed": s.seed, "source": "synthetic"})
    print(f"wrote {len(train)} samples to {s.path('cache_dir')}", file=out)
    return 0


def cmd_parse_check(s: Settings, out):
    if s.data_dir is None:
        raise ConfigurationError("parse-check needs --data-dir")
    results = check_directory(s.path("data_dir"), s.workers)
    bad = [(n, e) for n, e in results if e is not None]
    for name, err in results:
        print(f"{'FAIL' if err else 'ok  '} {name}" + (f": {err}" if err else ""), file=out)
    print(f"{len(results) - len(bad)}/{len(results)} files ok", file=out)
    return 1 if bad or not results else 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
    "parse-check": cmd_parse_check,
    "confusion": cmd_confusion,
}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[ns.command](Settings(ns), out)
    except (PGGCNError, OSError, ValueError) as exc:
        print(f"pggcn {ns.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
