"""Command-line entry point: ``python -m mlae <command>``.

Exit codes: 0 ok, 2 config/format error, 3 training divergence,
4 checkpoint corruption.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .analysis import model_similarity, write_report
from .backbone import BackboneConfig, BackboneModel, merge_model, model_from_state
from .config import RunConfig
from .errors import CorruptCheckpointError, FormatError, MLAEError
from .masking import MaskSchedule
from .trainer import (SWEEP_AXES, SyntheticTask, TrainingDiverged, build_model, evaluate, make_synthetic_task,
                      read_dataset_csv, sweep, train, write_metrics_csv, write_sweep_csv)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CORRUPT = 0, 2, 3, 4

log = logging.getLogger("mlae")


# -- model checkpoints -----------------------------------------------------------

def save_model(path, model: BackboneModel, config: RunConfig, schedule: MaskSchedule | None) -> dict:
    meta = {"kind": "adapter" if model.has_adapters else "merged", "config": config.to_dict(),
            "backbone": model.config.to_dict(), "adapter": model.adapter_meta,
            "schedule": schedule.to_dict() if schedule is not None else None}
    return ckpt.save(path, model.state(), meta)


def load_model(path) -> tuple[BackboneModel, RunConfig, MaskSchedule | None, dict]:
    tensors, manifest = ckpt.load(path)
    meta = manifest["meta"]
    try:
        backbone = BackboneConfig(**meta["backbone"])
        config = RunConfig.from_dict(meta["config"])
        adapter_meta = meta.get("adapter") or None
        model = model_from_state(backbone, tensors, adapter_meta)
        sched = meta.get("schedule")
        schedule = MaskSchedule(**{k: tuple(v) if isinstance(v, list) else v for k, v in sched.items()}) \
            if sched and model.has_adapters else None
    except (KeyError, TypeError) as err:
        raise FormatError(f"{path}: malformed checkpoint metadata: {err}") from None
    return model, config, schedule, manifest


# -- tasks ---------------------------------------------------------------------------

def _task_from_config(config: RunConfig) -> SyntheticTask:
    t, b = config.task, config.backbone
    if t.get("train_csv"):
        splits = {}
        for name in ("train", "val", "test"):
            path = t.get(f"{name}_csv")
            splits[name] = read_dataset_csv(path, b.patch_tokens, b.token_dim) if path else \
                (np.zeros((0, b.patch_tokens, b.token_dim)), np.zeros(0, dtype=np.int64))
        return SyntheticTask(b.n_classes, b.patch_tokens, b.token_dim, -1, float("nan"), splits)
    return make_synthetic_task(b.n_classes, t["n_train"], t["n_val"], t["n_test"], t["difficulty"], t["seed"],
                               b.patch_tokens, b.token_dim, t["template_rank"])


def load_dataset(path, backbone: BackboneConfig) -> tuple[np.ndarray, np.ndarray]:
    """CSV (``label,t0_0,...``) or a binary dataset directory (tensors ``tokens`` and ``labels``)."""
    p = Path(path)
    if p.is_dir():
        tensors, _ = ckpt.load(p)
        if "tokens" not in tensors or "labels" not in tensors:
            raise FormatError(f"{p}: binary dataset needs 'tokens' and 'labels' tensors")
        x = np.asarray(tensors["tokens"], dtype=np.float64)
        if x.shape[1:] != (backbone.patch_tokens, backbone.token_dim):
            raise FormatError(f"{p}: tokens have shape {x.shape}")
        return x, np.asarray(tensors["labels"], dtype=np.int64)
    return read_dataset_csv(p, backbone.patch_tokens, backbone.token_dim)


def save_dataset(path, x: np.ndarray, y: np.ndarray) -> None:
    ckpt.save(path, {"tokens": x, "labels": np.asarray(y, dtype=np.int32)}, {"kind": "dataset"})


# -- commands -------------------------------------------------------------------------

def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for item in args.set or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise FormatError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        cfg.set(key, value)
    for item in args.flag or ():
        key, sep, raw = item.partition("=")
        if not sep or raw.lower() not in ("on", "off", "true", "false"):
            raise FormatError(f"--flag expects name=on|off, got {item!r}")
        cfg.set(f"adapter.flags.{key}", raw.lower() in ("on", "true"))
    if args.seed is not None:
        for k in ("init", "data", "dropout"):
            cfg.set(f"train.seeds.{k}", args.seed)
    if args.out:
        cfg.set("output_dir", str(args.out))
    return cfg


def _prepare_outdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as err:
        raise FormatError(f"output directory {path} is not writable: {err}") from None
    return path


def _file_logger(path: Path) -> logging.Handler:
    handler = logging.FileHandler(path, mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return handler


def cmd_init_config(args) -> int:
    text = RunConfig().dumps()
    if args.path:
        Path(args.path).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_outdir(cfg.output_dir)
    handler = _file_logger(out / "train.log")
    try:
        task = _task_from_config(cfg)
        tcfg = cfg.train
        model, schedule = build_model(cfg.backbone, tcfg)
        log.info("training %d trainable parameters, %d experts", model.trainable_parameter_count(schedule),
                 sum(schedule.counts))
        (out / "config.json").write_text(cfg.dumps())
        start = time.time()
        try:
            result = train(model, task, tcfg, schedule)
        except TrainingDiverged as err:
            write_metrics_csv(out / "metrics.csv", err.history)
            save_model(out / "checkpoint", model, cfg, schedule)
            print(f"error: {err}", file=sys.stderr)
            return EXIT_DIVERGED
        write_metrics_csv(out / "metrics.csv", result.history)
        save_model(out / "checkpoint", model, cfg, schedule)
        log.info("finished in %.1fs", time.time() - start)
    finally:
        log.removeHandler(handler)
        handler.close()
    x, y = task.split("test")
    if len(y):
        print(f"{100 * evaluate(model, x, y, schedule):.1f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg, schedule, _ = load_model(args.checkpoint)
    if args.dataset:
        x, y = load_dataset(args.dataset, model.config)
    else:
        x, y = _task_from_config(cfg).split("test")
    print(f"{100 * evaluate(model, x, y, schedule):.1f}")
    return EXIT_OK


def cmd_merge(args) -> int:
    model, cfg, schedule, _ = load_model(args.input)
    if not model.has_adapters:
        raise FormatError("no adapters present")
    merged = merge_model(model, schedule)
    _prepare_outdir(Path(args.output))
    save_model(args.output, merged, cfg, None)
    return EXIT_OK


def cmd_analyze(args) -> int:
    model, cfg, _, _ = load_model(args.checkpoint)
    if not model.has_adapters:
        raise FormatError("no adapters present")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "similarity"
    _prepare_outdir(out)
    report = model_similarity(model)
    write_report(report, out, svg=not args.no_svg)
    print(f"model mean |cos| = {report.model_abs_mean:.4f}, signed = {report.model_mean:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_outdir(cfg.output_dir)
    values = []
    for v in args.values.split(","):
        try:
            values.append(json.loads(v))
        except json.JSONDecodeError:
            values.append(v)
    seeds = [int(s) for s in args.seeds.split(",")]
    task = _task_from_config(cfg)
    table = sweep(cfg.backbone, task, cfg.train, args.axis, values, seeds, runs_csv=out / f"sweep_{args.axis}_runs.csv")
    write_sweep_csv(out / f"sweep_{args.axis}.csv", args.axis, table)
    for row in table:
        print(f"{row[args.axis]}\t{100 * row['mean_acc']:.1f}")
    return EXIT_OK


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config JSON (defaults if omitted)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field by dotted path")
    p.add_argument("--flag", nargs="+", metavar="NAME=on|off", help="adapter flags: decomposition, masking, adaptive")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--seed", type=int, help="set all three training seeds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-config", help="write the default run config")
    p.add_argument("path", nargs="?")
    p.set_defaults(func=cmd_init_config)

    p = sub.add_parser("train", help="train adapters; writes checkpoint/ and metrics.csv")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print top-1 accuracy (%%) of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--dataset", help="CSV file or binary dataset directory (default: config test split)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("merge", help="fold adapters into the base weights")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("analyze", help="expert cosine-similarity report")
    p.add_argument("checkpoint")
    p.add_argument("--out")
    p.add_argument("--no-svg", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="train/test over one ablation axis")
    _add_config_args(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CorruptCheckpointError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CORRUPT
    except TrainingDiverged as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (MLAEError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
