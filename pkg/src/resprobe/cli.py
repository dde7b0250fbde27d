"""Command-line experiment runner.

    resprobe train       --config c.yaml [--seed N] [--out DIR]
    resprobe share-train --config c.yaml [--seed N] [--out DIR]
    resprobe probe       --checkpoint ck [--split train|val|test] [--out DIR]
    resprobe drop-scan   --checkpoint ck [--split ...] [--out DIR]
    resprobe unroll      --checkpoint ck [--split ...] [--extra-steps K] [--alpha A]
    resprobe gradcheck   [--seed N]

Output goes to --out, else the config's output_dir, else $RESPROBE_OUT,
else ./runs.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .config import PROBE_NAMES, SPLITS, ConfigError, DataConfig, ExperimentConfig, dumps, load_config
from .data import Dataset, balanced_subset, load_cifar_binary, load_idx, synthetic_clusters
from .gradcheck import run_gradcheck as _gradcheck_suite
from .nn import build_model
from .probes import borderline_split, group_metrics, probe_sweep
from .share_unroll import SharingSpec, UnrollSpec, build_shared_model, unroll_last_block, unroll_metrics
from .train import OptimizerState, evaluate, train_epoch

OUT_ENV = "RESPROBE_OUT"


class RunError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data


def load_split(data: DataConfig, split: str) -> Dataset:
    """Load ``split``; held-out splits reuse the training split's statistics."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    if data.source == "synthetic":
        args = (data.n_per_class, data.class_count, data.image_shape, data.separation, data.seed)
        train = synthetic_clusters(*args, split="train")
        if split == "train":
            return train
        held = synthetic_clusters(*args, split="val", stats=(train.mean, train.std))
        held.split = split
        return held
    if data.source in ("cifar10", "cifar100"):
        classes = 10 if data.source == "cifar10" else 100
        train = load_cifar_binary(data.path, data.subset_size, data.seed, "train", classes)
        if split == "train":
            return train
        size = data.val_subset_size if split == "val" else None
        held = load_cifar_binary(data.path, size, data.seed, "test", classes, stats=(train.mean, train.std))
        held.split = split
        return held
    train = load_idx(data.path, split="train")
    if data.subset_size is not None:
        train = train.subset(balanced_subset(train.labels, data.subset_size, train.class_count, data.seed))
    if split == "train":
        return train
    held = load_idx(data.val_path, split=split, class_count=train.class_count, stats=(train.mean, train.std))
    if split == "val" and data.val_subset_size is not None:
        held = held.subset(balanced_subset(held.labels, data.val_subset_size, held.class_count, data.seed))
    return held


# ---------------------------------------------------------------------------
# runs


def resolve_out(out: str | None, cfg: ExperimentConfig | None = None) -> Path:
    if out:
        return Path(out)
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(OUT_ENV, "runs"))


def _prepare_run_dir(root: Path, run_id: str, force: bool) -> Path:
    run_dir = root / run_id
    if run_dir.exists() and any(run_dir.iterdir()) and not force:
        raise RunError(f"run directory {run_dir} already exists; choose another run_id or pass --force")
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        probe = run_dir / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise RunError(f"output directory {run_dir} is not writable: {e}") from None
    for name in ("metrics.csv", "probes.csv", "unroll.csv"):
        (run_dir / name).unlink(missing_ok=True)
    return run_dir


def _config_blob(cfg: ExperimentConfig) -> dict:
    d = cfg.to_dict()
    d["output_dir"] = None  # where a run is written does not change what it computes
    return d


def _json_safe(v):
    if isinstance(v, float) and not np.isfinite(v):
        return str(v)
    if isinstance(v, dict):
        return {str(k): _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return v


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_json_safe(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def build_for(cfg: ExperimentConfig):
    if cfg.sharing is not None:
        return build_shared_model(cfg.architecture, cfg.sharing, cfg.seed)
    return build_model(cfg.architecture, cfg.seed)


def run_train(cfg: ExperimentConfig, out: str | None = None, force: bool = False, log=print) -> Path:
    """Train, writing config.yaml, metrics.csv, probes.csv, summary.json, final.ckpt and best.ckpt."""
    cfg.validate()
    run_dir = _prepare_run_dir(resolve_out(out, cfg), cfg.run_id, force)
    (run_dir / "config.yaml").write_text(dumps(cfg), encoding="utf-8")
    train = load_split(cfg.data, "train")
    val = load_split(cfg.data, "val")
    probe_data = {"train": train, "val": val}.get(cfg.probe_split)
    if probe_data is None:
        probe_data = load_split(cfg.data, cfg.probe_split)
    model = build_for(cfg)
    if train.image_shape != cfg.architecture.input_shape:
        raise ConfigError(f"data shape {train.image_shape} does not match input_shape {cfg.architecture.input_shape}")
    metrics = io.CsvLog(run_dir / "metrics.csv", io.METRICS_COLUMNS)
    probes = io.CsvLog(run_dir / "probes.csv", io.PROBES_COLUMNS)
    state = OptimizerState.zeros_like(model.named_parameters())
    extra = {"config": _config_blob(cfg)}
    best_acc, best_epoch = -1.0, 0
    val_loss, val_acc, _ = evaluate(model, val, cfg.batch_size_eval)
    t0 = time.perf_counter()
    for epoch in range(cfg.train.epochs):
        row = train_epoch(model, train, cfg.train, epoch, state)
        val_loss, val_acc, _ = evaluate(model, val, cfg.batch_size_eval)
        done = epoch + 1
        metrics.write([dict(row, run_id=cfg.run_id, epoch=done, val_loss=val_loss, val_acc=val_acc)])
        log(f"epoch {done}: lr={row['lr']:g} train_loss={row['train_loss']:.4f} train_acc={row['train_acc']:.4f} "
            f"val_loss={val_loss:.4f} val_acc={val_acc:.4f} ({time.perf_counter() - t0:.0f}s)")
        due = tuple(p.name for p in cfg.probes if done % p.every == 0)
        if due:
            recs = probe_sweep(model, probe_data, due, cfg.batch_size_eval, log=log)
            probes.write(_probe_rows(recs, cfg.run_id, done))
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, done
            io.save_checkpoint(run_dir / "best.ckpt", model, done, dict(extra, val_acc=val_acc))
    if cfg.train.epochs == 0:
        best_acc = val_acc
        io.save_checkpoint(run_dir / "best.ckpt", model, 0, dict(extra, val_acc=val_acc))
    io.save_checkpoint(run_dir / "final.ckpt", model, cfg.train.epochs, dict(extra, val_acc=val_acc))
    _write_json(run_dir / "summary.json", {
        "run_id": cfg.run_id,
        "epochs": cfg.train.epochs,
        "final_val_acc": val_acc,
        "final_val_loss": val_loss,
        "best_val_acc": best_acc,
        "best_epoch": best_epoch,
        "parameters": model.parameter_count(),
    })
    return run_dir


def _probe_rows(records, run_id: str, epoch: int) -> list[dict]:
    rows = []
    for rec in records:
        for probe, block, stage, value, excl in rec.rows():
            rows.append({"run_id": run_id, "epoch": epoch, "split": rec.split, "probe": probe,
                         "block": block, "stage": stage, "value": value, "n_excluded": excl})
    return rows


def _load_for_probe(checkpoint):
    model, header = io.load_checkpoint(checkpoint)
    blob = header.get("extra", {}).get("config")
    if blob is None:
        raise RunError(f"{checkpoint} carries no experiment config; cannot locate its data")
    cfg = ExperimentConfig.from_dict(blob)
    return model, header, cfg


def _default_out(checkpoint, out, tag: str, split: str) -> Path:
    """Standalone analyses get their own directory next to the checkpoint, rewritten on every call."""
    ck = Path(checkpoint)
    path = Path(out) if out else ck.parent / f"{tag}-{ck.stem}-{split}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def run_probe(checkpoint, probes=PROBE_NAMES, split: str = "train", out: str | None = None, log=print,
              csv_name: str = "probes.csv", summary_name: str = "probes_summary.json", tag: str = "probe") -> Path:
    """Write one row per (probe, block) to a fresh probes.csv plus a JSON summary."""
    unknown = [p for p in probes if p not in PROBE_NAMES]
    if unknown:
        raise ConfigError(f"unknown probe(s): {unknown}")
    model, header, cfg = _load_for_probe(checkpoint)
    out_dir = _default_out(checkpoint, out, tag, split)
    data = load_split(cfg.data, split)
    recs = probe_sweep(model, data, tuple(probes), cfg.batch_size_eval, log=log)
    path = out_dir / csv_name
    path.unlink(missing_ok=True)
    io.CsvLog(path, io.PROBES_COLUMNS).write(_probe_rows(recs, cfg.run_id, header["epoch"]))
    _, acc, _ = evaluate(model, data, cfg.batch_size_eval)
    summary = {"checkpoint": Path(checkpoint).name, "epoch": header["epoch"], "split": split, "accuracy": acc,
               "probes": {p: [getattr(r, p) for r in recs] for p in probes}}
    if "intermediate_accuracy" in probes:
        rep = borderline_split(model, data, cfg.tau, cfg.batch_size_eval)
        last = model.final_stage_blocks()[-5:]
        summary["tau"] = cfg.tau
        summary["group_sizes"] = {g: int(len(v)) for g, v in rep.groups.items()}
        summary["group_metrics"] = {
            g: {str(b): (None if m is None else dict(zip(("loss", "accuracy", "entropy"), m))) for b, m in per.items()}
            for g, per in group_metrics(model, data, rep.groups, last, cfg.batch_size_eval).items()
        }
    _write_json(out_dir / summary_name, summary)
    return path


def run_drop_scan(checkpoint, split: str = "train", out: str | None = None, log=print) -> Path:
    return run_probe(checkpoint, ("drop_accuracy",), split, out, log, "drop_scan.csv", "drop_scan_summary.json", "drop-scan")


def run_unroll(checkpoint, spec: UnrollSpec, split: str = "train", out: str | None = None, log=print) -> Path:
    """Calibrate the extra steps on the train split, then write unroll.csv for ``split``."""
    spec.validate()
    model, _, cfg = _load_for_probe(checkpoint)
    out_dir = _default_out(checkpoint, out, "unroll", split)
    train = load_split(cfg.data, "train")
    data = train if split == "train" else load_split(cfg.data, split)
    unrolled = unroll_last_block(model, spec, train, cfg.batch_size_eval)
    rows = unroll_metrics(unrolled, data, cfg.tau, cfg.batch_size_eval)
    path = out_dir / "unroll.csv"
    path.unlink(missing_ok=True)
    io.CsvLog(path, io.UNROLL_COLUMNS).write([dict(r, run_id=cfg.run_id, split=split) for r in rows])
    log(f"unroll: {spec.extra_steps} extra steps, alpha={spec.alpha:g}, {len(rows)} rows -> {path}")
    return path


def run_gradcheck(seed: int = 0, size: int = 4, log=print) -> bool:
    report = _gradcheck_suite(seed, size)
    log(report.text())
    if not report.passed:
        log("FAILED: " + ", ".join(r.name for r in report.failures))
    return report.passed


# ---------------------------------------------------------------------------
# argument parsing


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="resprobe", description="Residual-network probing experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, needs):
        if needs == "config":
            p.add_argument("--config", required=True, help="YAML experiment config")
            p.add_argument("--seed", type=int, help="override train.seed")
            p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
        else:
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--split", choices=SPLITS, default="train")
        p.add_argument("--out", help=f"output directory (default: config output_dir, ${OUT_ENV}, ./runs)")

    common(sub.add_parser("train", help="train a model"), "config")
    p = sub.add_parser("share-train", help="train a weight-shared model")
    common(p, "config")
    p.add_argument("--share-from", type=int, help="first tied block of every stage")
    p.add_argument("--bn-mode", choices=("naive", "unshared_stats", "ubn_full"))
    p = sub.add_parser("probe", help="per-block probes on a checkpoint")
    common(p, "checkpoint")
    p.add_argument("--probes", default=",".join(PROBE_NAMES), help="comma-separated probe names")
    common(sub.add_parser("drop-scan", help="accuracy with each block dropped"), "checkpoint")
    p = sub.add_parser("unroll", help="unroll the last block for extra steps")
    common(p, "checkpoint")
    p.add_argument("--extra-steps", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=4, help="spatial size of the tiny test models")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command in ("train", "share-train"):
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg.train.seed = args.seed
            if args.command == "share-train":
                spec = cfg.sharing or SharingSpec()
                if args.share_from is not None:
                    spec.share_from_block = args.share_from
                if args.bn_mode is not None:
                    spec.bn_mode = args.bn_mode
                cfg.sharing = spec
            run_dir = run_train(cfg, args.out, args.force)
            print(f"run written to {run_dir}")
        elif args.command == "probe":
            probes = tuple(p.strip() for p in args.probes.split(",") if p.strip())
            print(f"probes written to {run_probe(args.checkpoint, probes, args.split, args.out)}")
        elif args.command == "drop-scan":
            print(f"drop scan written to {run_drop_scan(args.checkpoint, args.split, args.out)}")
        elif args.command == "unroll":
            _, _, cfg = _load_for_probe(args.checkpoint)
            spec = cfg.unroll or UnrollSpec()
            if args.extra_steps is not None:
                spec.extra_steps = args.extra_steps
            if args.alpha is not None:
                spec.alpha = args.alpha
            run_unroll(args.checkpoint, spec, args.split, args.out)
        elif args.command == "gradcheck":
            return 0 if run_gradcheck(args.seed, args.size) else 1
    except (ConfigError, RunError, io.CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
