"""Command-line entry point: gen, train, eval, bench-attention, selftest.

Settings resolve as CLI flag > ``--config`` file (flat ``key = value``) > defaults,
and the resolved set is written next to each command's outputs.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from . import attention
from .aam_head import ModelVariant, build_model
from .bench import DEFAULT_DOT_CAP_N, emit_curves, run_timing
from .checkpoint import load_checkpoint, save_checkpoint
from .data.corpus import ensure_dir_writable, make_corpus, read_manifest
from .data.raster import write_labels
from .errors import A2FPNError, DataError, UsageError
from .metrics import write_metric_csv
from .selftest import run_selftest
from .train import TrainConfig, evaluate, predict_labels, train_model

log = logging.getLogger("a2fpn")

DEFAULTS: Dict[str, object] = {
    "seed": 0,
    "size": 64,
    "num_classes": 4,
    "d_p": 64,
    "epochs": 20,
    "batch_size": 8,
    "lr": 3e-4,
    "variant": "a2fpn",
    "corpus": "corpus",
    "checkpoint": "",
    "out": "out",
    "tta": False,
    "augment": True,
    "train_count": 200,
    "val_count": 20,
    "test_count": 80,
    "noise_sigma": 0.05,
    "split": "test",
    "write_predictions": False,
    "repetitions": 5,
    "threads": 1,
    "dot_max_n": DEFAULT_DOT_CAP_N,
    "linear_max_n": 65536,
    "inject_fault": False,
}

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, raw):
    default = DEFAULTS[key]
    if isinstance(raw, str):
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in _BOOL_TRUE:
                return True
            if low in _BOOL_FALSE:
                return False
            raise UsageError(f"{key}: expected on/off, got {raw!r}")
        try:
            if isinstance(default, int):
                return int(raw)
            if isinstance(default, float):
                return float(raw)
        except ValueError:
            raise UsageError(f"{key}: cannot parse {raw!r}") from None
        return raw.strip()
    return raw


def read_config_file(path) -> Dict[str, object]:
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value)
    return values


def resolve_config(args: argparse.Namespace) -> Dict[str, object]:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(read_config_file(args.config))
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = _coerce(key, value)
    return cfg


def write_resolved_config(cfg: Dict[str, object], out_dir: Path, command: str) -> Path:
    path = out_dir / f"{command}_config.txt"
    with open(path, "w") as fh:
        for key in sorted(cfg):
            value = cfg[key]
            if isinstance(value, bool):
                value = "on" if value else "off"
            fh.write(f"{key} = {value}\n")
    return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(cfg) -> int:
    out = Path(cfg["out"])
    ensure_dir_writable(out)
    corpus = make_corpus(
        out,
        base_seed=cfg["seed"],
        counts=(cfg["train_count"], cfg["val_count"], cfg["test_count"]),
        size=cfg["size"],
        num_classes=cfg["num_classes"],
        noise_sigma=cfg["noise_sigma"],
    )
    write_resolved_config(cfg, out, "gen")
    print(f"manifest {corpus.manifest_path}")
    print(f"checksum {corpus.checksum()}")
    return 0


def _open_corpus(cfg):
    root = Path(cfg["corpus"])
    if not (root.is_file() or (root / "manifest.tsv").is_file()):
        raise UsageError(f"no corpus at {root}; run 'a2fpn gen' first or pass --corpus")
    return read_manifest(root)


def _variant(cfg) -> ModelVariant:
    return ModelVariant(cfg["variant"], cfg["num_classes"], cfg["d_p"])


def cmd_train(cfg) -> int:
    corpus = _open_corpus(cfg)
    out = Path(cfg["out"])
    ensure_dir_writable(out)
    ckpt_path = Path(cfg["checkpoint"]) if cfg["checkpoint"] else out / "model.ckpt"
    write_resolved_config(cfg, out, "train")
    model = build_model(_variant(cfg), cfg["seed"])
    train_x, train_y = corpus.load("train")
    val_x, val_y = corpus.load("val")
    if train_y.max() >= cfg["num_classes"]:
        raise DataError(f"corpus labels reach {int(train_y.max())}, but num_classes is {cfg['num_classes']}")
    tcfg = TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        lr=cfg["lr"],
        seed=cfg["seed"],
        policy=TrainConfig().policy if cfg["augment"] else None,
    )
    metrics_path = out / "train_metrics.csv"
    start = time.perf_counter()
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_miou", "elapsed_s"])

        def on_epoch(rec):
            writer.writerow(
                [rec.epoch, f"{rec.train_loss:.10f}", f"{rec.val_miou:.10f}", f"{time.perf_counter() - start:.3f}"]
            )
            fh.flush()
            print(f"epoch {rec.epoch}: loss {rec.train_loss:.4f}, val mIoU {rec.val_miou:.4f}")

        result = train_model(model, train_x, train_y, val_x, val_y, tcfg, on_epoch=on_epoch)
    save_checkpoint(ckpt_path, model, result.best_state, extra={"best_epoch": result.best_epoch})
    print(f"checkpoint {ckpt_path} (best epoch {result.best_epoch})")
    print(f"metrics {metrics_path}")
    return 0


def cmd_eval(cfg, explicit: Dict[str, object]) -> int:
    if not cfg["checkpoint"]:
        raise UsageError("eval needs --checkpoint")
    corpus = _open_corpus(cfg)
    out = Path(cfg["out"])
    ensure_dir_writable(out)
    model, meta = load_checkpoint(
        cfg["checkpoint"],
        expect_classes=explicit.get("num_classes"),
        expect_d_p=explicit.get("d_p"),
    )
    resolved = dict(cfg, num_classes=meta["num_classes"], d_p=meta["d_p"], variant=meta["kind"])
    write_resolved_config(resolved, out, "eval")
    images, labels = corpus.load(cfg["split"])
    cm = evaluate(model, images, labels, meta["num_classes"], tta=cfg["tta"])
    metrics_path = out / f"eval_{cfg['split']}_metrics.csv"
    text = write_metric_csv(cm, metrics_path)
    if cfg["write_predictions"]:
        pred_dir = out / "predictions"
        pred_dir.mkdir(exist_ok=True)
        preds = predict_labels(model, images, tta=cfg["tta"])
        for entry, pred in zip(corpus.split(cfg["split"]), preds):
            write_labels(pred_dir / f"{cfg['split']}_{entry.seed}.pgm", pred)
    print(text, end="")
    print(f"metrics {metrics_path}")
    return 0


def _powers(lo: int, hi: int):
    n, out = lo, []
    while n <= hi:
        out.append(n)
        n *= 2
    return out


def cmd_bench(cfg) -> int:
    out = Path(cfg["out"])
    ensure_dir_writable(out)
    write_resolved_config(cfg, out, "bench")
    rows = []

    def report(exc):
        print(f"capacity: {exc}", file=sys.stderr)

    rows += run_timing(
        "dot_product", _powers(256, cfg["dot_max_n"]), repetitions=cfg["repetitions"], seed=cfg["seed"],
        threads=cfg["threads"], on_capacity=report,
    )
    rows += run_timing(
        "linear", _powers(256, cfg["linear_max_n"]), repetitions=cfg["repetitions"], seed=cfg["seed"],
        threads=cfg["threads"], on_capacity=report,
    )
    path = out / "attention_curves.csv"
    emit_curves(rows, path)
    print(f"curves {path} ({len(rows)} rows)")
    return 0


def cmd_selftest(cfg) -> int:
    attention.set_fault_injection(cfg["inject_fault"])
    try:
        results = run_selftest()
    finally:
        attention.set_fault_injection(False)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<{width}}  measured {r.measured:.3e}  tolerance {r.tolerance:.1e}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} properties passed")
    return 3 if failed else 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _onoff(value: str) -> str:
    if value.lower() not in _BOOL_TRUE | _BOOL_FALSE:
        raise argparse.ArgumentTypeError("expected on/off")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="a2fpn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="flat key = value settings file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        return p

    p = common(sub.add_parser("gen", help="generate the synthetic corpus"))
    p.add_argument("--size", type=int)
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--train-count", dest="train_count", type=int)
    p.add_argument("--val-count", dest="val_count", type=int)
    p.add_argument("--test-count", dest="test_count", type=int)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)

    p = common(sub.add_parser("train", help="train a segmentation model"))
    p.add_argument("--corpus")
    p.add_argument("--variant", choices=("baseline", "fpn", "a2fpn"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--d-p", dest="d_p", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--augment", type=_onoff)

    p = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    p.add_argument("--corpus")
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--tta", type=_onoff)
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--d-p", dest="d_p", type=int)
    p.add_argument("--write-predictions", dest="write_predictions", type=_onoff)

    p = common(sub.add_parser("bench-attention", help="time dot-product vs linear attention"))
    p.add_argument("--repetitions", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--dot-max-n", dest="dot_max_n", type=int)
    p.add_argument("--linear-max-n", dest="linear_max_n", type=int)

    p = common(sub.add_parser("selftest", help="run the oracle property suite"))
    p.add_argument("--inject-fault", dest="inject_fault", action="store_const", const="on")
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            explicit = {k: v for k, v in vars(args).items() if k in ("num_classes", "d_p") and v is not None}
            if getattr(args, "config", None):
                file_cfg = read_config_file(args.config)
                explicit = {**{k: file_cfg[k] for k in ("num_classes", "d_p") if k in file_cfg}, **explicit}
            return cmd_eval(cfg, explicit)
        if args.command == "bench-attention":
            return cmd_bench(cfg)
        return cmd_selftest(cfg)
    except A2FPNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
