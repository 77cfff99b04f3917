"""Command-line entry point: data generation, pre-training, fine-tuning, evaluation and sweeps.

Exit codes are a stable contract: 0 ok, 2 config error, 3 I/O or dataset
format error, 4 numerical abort, 5 checkpoint mismatch.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import config as configmod
from .config import RunConfig
from .errors import CheckpointMismatchError, ConfigError, DatasetFormatError
from .metrics import REPORT_KEYS
from .model import load_checkpoint, load_model, save_checkpoint, save_model
from .scenegen import Dataset, generate_dataset, load_dataset, save_dataset
from .trainer import (
    LOSS_FIELDS,
    METRIC_KEYS,
    SWEEP_FIELDS,
    TrainingAborted,
    evaluate_model,
    finetune,
    pretrain,
    retrieval_accuracy,
    run_sweep,
    summarize_sweep,
)

log = logging.getLogger("pretram")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL, EXIT_CHECKPOINT = 0, 2, 3, 4, 5
SCHEMA = 1
HISTORY_FIELDS = ("epoch", "train_loss") + METRIC_KEYS


# --------------------------------------------------------------------- writers

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row.get(k)) for k in header])


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def metadata() -> dict:
    """Host and time facts; kept out of every artifact except summary metadata blocks."""
    return {
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "host": platform.node(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


def make_report(metrics: dict, cfg: RunConfig) -> dict:
    report = {k: metrics[k] for k in METRIC_KEYS}
    report["n_samples"] = metrics["n_samples"]
    report["schema"] = SCHEMA
    report["config_echo"] = cfg.echo()
    assert set(report) == set(REPORT_KEYS)
    return report


def sweep_svg(summary: dict, metric: str = "ade_5", width: int = 560, height: int = 360) -> str:
    """Line chart of a metric against data fraction, one line per arm with a mean +/- sd band."""
    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")
    left, right, top, bottom = 64, 140, 24, 48
    series = {}
    for arm, by_frac in summary.items():
        pts = sorted((float(f), s[metric]["mean"], s[metric]["sd"]) for f, s in by_frac.items())
        series[arm] = pts
    xs = sorted({p[0] for pts in series.values() for p in pts}) or [0.0, 1.0]
    lows = [m - s for pts in series.values() for _, m, s in pts] or [0.0]
    highs = [m + s for pts in series.values() for _, m, s in pts] or [1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(lows), max(highs)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (y1 - y) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for x in xs:
        out.append(f'<text x="{px(x):.1f}" y="{top + ph + 16}" font-size="11" text-anchor="middle">{x:g}</text>')
    for i in range(5):
        y = y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{left - 6}" y="{py(y) + 4:.1f}" font-size="11" text-anchor="end">{y:.3f}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" font-size="12" text-anchor="middle">data fraction</text>')
    out.append(
        f'<text x="14" y="{top + ph / 2:.1f}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {top + ph / 2:.1f})">{escape(metric)} (m)</text>'
    )
    for i, (arm, pts) in enumerate(sorted(series.items())):
        color = colors[i % len(colors)]
        upper = " ".join(f"{px(x):.1f},{py(m + s):.1f}" for x, m, s in pts)
        lower = " ".join(f"{px(x):.1f},{py(m - s):.1f}" for x, m, s in reversed(pts))
        out.append(f'<polygon points="{upper} {lower}" fill="{color}" fill-opacity="0.15" stroke="none"/>')
        line = " ".join(f"{px(x):.1f},{py(m):.1f}" for x, m, _ in pts)
        out.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, m, _ in pts:
            out.append(f'<circle cx="{px(x):.1f}" cy="{py(m):.1f}" r="3" fill="{color}"/>')
        ly = top + 14 + 18 * i
        out.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 38}" y="{ly + 4}" font-size="12">{escape(arm)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# -------------------------------------------------------------------- commands

def _load_config(args) -> RunConfig:
    return configmod.load(args.config) if args.config else RunConfig()


def _dataset(args, cfg: RunConfig) -> Dataset:
    if getattr(args, "data", None):
        return load_dataset(args.data)
    log.info("no --data given; generating the dataset from [data]")
    return generate_dataset(cfg.data)


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    dataset = generate_dataset(cfg.data)
    save_dataset(dataset, args.out, config_echo=cfg.echo()["data"])
    log.info("wrote %d maps and %s scenes to %s", len(dataset.maps), {k: len(v) for k, v in dataset.scenes.items()}, args.out)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    dataset = _dataset(args, cfg)
    ckpt = Path(args.out)
    log_dir = Path(args.log_dir) if args.log_dir else ckpt.parent
    model_cfg = cfg.model_config()
    status, code = "ok", EXIT_OK

    def progress(rec):
        if rec["iteration"] % 25 == 0:
            log.info("iter %d epoch %d total %.4f", rec["iteration"], rec["epoch"], rec["total"])

    try:
        result = pretrain(dataset, cfg.pretrain, model_cfg, progress)
        model, records = result.model, result.records
    except TrainingAborted as exc:
        log.error("pre-training aborted: %s; keeping the last good weights", exc)
        model, records = exc.model, exc.records
        status, code = f"aborted: {exc}", EXIT_NUMERICAL
    save_checkpoint(ckpt, model.state_dict())
    write_csv(log_dir / "losses.csv", LOSS_FIELDS, records)
    summary = {
        "schema": SCHEMA,
        "status": status,
        "iterations": len(records),
        "final": records[-1] if records else None,
        "config_echo": cfg.echo(),
        "metadata": metadata(),
    }
    if code == EXIT_OK:
        summary["tmcl_retrieval_test"] = retrieval_accuracy(model, dataset, dataset.test, cfg.eval.batch_scenes, cfg.eval.seed)
    write_json(log_dir / "summary.json", summary)
    return code


def cmd_finetune(args) -> int:
    cfg = _load_config(args)
    if args.load_mode:
        cfg.finetune.load_mode = args.load_mode
    if cfg.finetune.load_mode != "none" and not args.ckpt:
        raise ConfigError(f"load_mode {cfg.finetune.load_mode!r} requires --ckpt")
    checkpoint = load_checkpoint(args.ckpt) if args.ckpt and cfg.finetune.load_mode != "none" else None
    dataset = _dataset(args, cfg)
    out = Path(args.out)
    try:
        result = finetune(dataset, cfg.finetune, cfg.model_config(), checkpoint, eval_every_epoch=not args.final_eval_only)
    except TrainingAborted as exc:
        log.error("fine-tuning aborted: %s", exc)
        save_model(exc.model, out / "model.ckpt")
        write_csv(out / "history.csv", HISTORY_FIELDS, exc.records)
        return EXIT_NUMERICAL
    save_model(result.model, out / "model.ckpt")
    write_csv(out / "history.csv", HISTORY_FIELDS, result.history)
    metrics = result.report
    if cfg.eval.split != "test":
        metrics = evaluate_model(result.model, dataset, cfg.eval.split, cfg.eval.batch_scenes, cfg.eval.seed)
    write_json(out / "report.json", make_report(metrics, cfg))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    dataset = _dataset(args, cfg)
    model = load_model(args.model, cfg.model_config())
    metrics = evaluate_model(model, dataset, cfg.eval.split, cfg.eval.batch_scenes, cfg.eval.seed)
    write_json(Path(args.out), make_report(metrics, cfg))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    dataset = _dataset(args, cfg)
    out = Path(args.out)
    rows = run_sweep(dataset, cfg.sweep, cfg.pretrain, cfg.finetune, cfg.model_config())
    write_csv(out / "results.csv", SWEEP_FIELDS, rows)
    summary = summarize_sweep(rows)
    write_json(
        out / "summary.json",
        {
            "schema": SCHEMA,
            "summary": summary,
            "failed": sum(r["status"] != "ok" for r in rows),
            "config_echo": cfg.echo(),
            "metadata": metadata(),
        },
    )
    (out / "ade5_vs_fraction.svg").write_text(sweep_svg(summary), encoding="utf-8")
    return EXIT_OK


def cmd_config_ref(args) -> int:
    text = configmod.reference()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pretram", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, func, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(func=func)
        return sp

    def with_config(sp):
        sp.add_argument("--config", help="run configuration file (defaults apply when omitted)")

    sp = cmd("gen-data", cmd_gen_data, "generate a synthetic dataset")
    with_config(sp)
    sp.add_argument("--out", required=True, help="dataset directory")

    sp = cmd("pretrain", cmd_pretrain, "contrastive pre-training")
    with_config(sp)
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--out", required=True, help="checkpoint file to write")
    sp.add_argument("--log-dir", help="where losses.csv and summary.json go (default: checkpoint directory)")

    sp = cmd("finetune", cmd_finetune, "fine-tune a predictor, optionally from a pre-trained checkpoint")
    with_config(sp)
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--ckpt", help="pre-trained checkpoint")
    sp.add_argument("--load-mode", choices=("none", "all", "te_only", "me_only"), help="overrides [finetune] load_mode")
    sp.add_argument("--out", required=True, help="output directory for model.ckpt, history.csv and report.json")
    sp.add_argument("--final-eval-only", action="store_true", help="skip per-epoch test evaluation")

    sp = cmd("eval", cmd_eval, "evaluate a fine-tuned model")
    with_config(sp)
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--model", required=True, help="fine-tuned model file")
    sp.add_argument("--out", required=True, help="report JSON path")

    sp = cmd("sweep", cmd_sweep, "data-efficiency and ablation sweep")
    with_config(sp)
    sp.add_argument("--data", help="dataset directory (generated from [data] when omitted)")
    sp.add_argument("--out", required=True, help="output directory")

    sp = cmd("config-ref", cmd_config_ref, "print the configuration reference with defaults")
    sp.add_argument("--out", help="write to a file instead of stdout")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointMismatchError as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (OSError, DatasetFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
