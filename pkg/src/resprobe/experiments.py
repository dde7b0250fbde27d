"""Desk-scale experiments: configurations, per-run summaries and the direction checks.

Used by the runnable scripts and by the acceptance tests so both measure
exactly the same quantities.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import DataConfig, ExperimentConfig, ProbeSchedule
from .data import Dataset
from .nn import ArchitectureConfig, Model, build_model, single_repr_config
from .probes import borderline_split, grad_norm_ratio, group_metrics, probe_sweep
from .share_unroll import SharingSpec, UnrollSpec, activation_explosion_probe, build_shared_model, unroll_last_block, unroll_metrics
from .train import TrainConfig, evaluate

DIGITS_NOISE = 0.3
DIGITS_EPOCHS = 20
STANDIN_SEEDS = (0, 1, 2, 3)
MEASURED_BLOCKS = 5  # borderline analysis covers the last five blocks
ENTROPY_SLACK = 0.05


def digits_config(data_dir, seed: int = 0, epochs: int = DIGITS_EPOCHS, probes=()) -> ExperimentConfig:
    """Single-representation net (8 blocks x 16 channels) on the noisy digits IDX export."""
    d = Path(data_dir)
    return ExperimentConfig(
        run_id=f"digits-single-s{seed}",
        architecture=single_repr_config(8, 16, (1, 8, 8), 10),
        train=TrainConfig(
            epochs=epochs,
            batch_size=64,
            lr_schedule=[(8, 0.1), (12, 0.02), (16, 0.004), (math.inf, 0.0008)],
            translate_pixels=1,
            seed=seed,
        ),
        data=DataConfig(source="idx", path=str(d / "train-images-idx3-ubyte"), val_path=str(d / "test-images-idx3-ubyte")),
        probes=[ProbeSchedule(p, epochs) for p in probes],
        unroll=UnrollSpec(20, 0.5),
    )


def cifar_config(cifar_dir, seed: int = 0, epochs: int = 4) -> ExperimentConfig:
    """Single-representation net on a class-balanced 5k CIFAR-10 subset."""
    return ExperimentConfig(
        run_id=f"cifar10-desk-s{seed}",
        architecture=single_repr_config(8, 16, (3, 32, 32), 10),
        train=TrainConfig(
            epochs=epochs,
            batch_size=64,
            lr_schedule=[(2, 0.1), (3, 0.02), (math.inf, 0.004)],
            flip=True,
            translate_pixels=2,
            seed=seed,
        ),
        data=DataConfig(source="cifar10", path=str(cifar_dir), subset_size=5000, val_subset_size=1000),
    )


# ---------------------------------------------------------------------------
# per-run summary


@dataclass
class RunSummary:
    seed: int
    train_acc: float
    val_acc: float
    cosine: list  # per block, train split
    l2_ratio: list
    drop_accuracy: list
    group_sizes: dict
    measured_blocks: list
    group_metrics: dict  # group -> block -> (loss, acc, entropy) | None
    unroll_rows: list
    unroll_zero_exact: bool
    seconds: dict = field(default_factory=dict)


def summarize(model: Model, train: Dataset, val: Dataset | None = None, tau: float = 0.1, unroll_steps: int = 2,
              batch_size: int = 256, seed: int = 0) -> RunSummary:
    """All train-split measurements needed for the direction checks."""
    t0 = time.perf_counter()
    _, train_acc, _ = evaluate(model, train, batch_size)
    val_acc = evaluate(model, val, batch_size)[1] if val is not None else float("nan")
    recs = probe_sweep(model, train, ("cosine_loss", "l2_ratio", "drop_accuracy"), batch_size)
    t1 = time.perf_counter()
    rep = borderline_split(model, train, tau, batch_size)
    measured = model.final_stage_blocks()[-MEASURED_BLOCKS:]
    gm = group_metrics(model, train, rep.groups, measured, batch_size)
    zero = unroll_last_block(model, UnrollSpec(0, 0.5))
    exact = bool(np.array_equal(zero.logits(train.images), model.logits(train.images)))
    rows = unroll_metrics(unroll_last_block(model, UnrollSpec(unroll_steps, 0.5), train, batch_size), train, tau, batch_size)
    t2 = time.perf_counter()
    return RunSummary(
        seed=seed,
        train_acc=train_acc,
        val_acc=val_acc,
        cosine=[r.cosine_loss for r in recs],
        l2_ratio=[r.l2_ratio for r in recs],
        drop_accuracy=[r.drop_accuracy for r in recs],
        group_sizes={g: int(len(v)) for g, v in rep.groups.items()},
        measured_blocks=measured,
        group_metrics=gm,
        unroll_rows=rows,
        unroll_zero_exact=exact,
        seconds={"probe": t1 - t0, "analysis": t2 - t1},
    )


# ---------------------------------------------------------------------------
# direction checks


def top_half_cosine(s: RunSummary) -> float:
    n = len(s.cosine)
    return float(np.mean(s.cosine[n // 2:]))


def l2_first_vs_top(s: RunSummary) -> tuple[float, float]:
    n = len(s.l2_ratio)
    return float(s.l2_ratio[0]), float(np.mean(s.l2_ratio[n // 2:]))


def drop_gap(s: RunSummary) -> float:
    """Accuracy loss from dropping the first block minus that from dropping the last."""
    return (s.train_acc - s.drop_accuracy[0]) - (s.train_acc - s.drop_accuracy[-1])


def nonincreasing(values, slack: float = ENTROPY_SLACK) -> bool:
    """Every step may rise by at most ``slack`` relative to the previous value."""
    return all(b <= a * (1 + slack) for a, b in zip(values, values[1:]))


def borderline_check(s: RunSummary, back: int = 3) -> dict:
    bl = s.group_metrics.get("borderline", {})
    blocks = s.measured_blocks
    out = {"n_borderline": s.group_sizes.get("borderline", 0), "acc_final": None, "acc_earlier": None,
           "accuracy_rises": False, "entropy_ok": {}}
    if bl and bl[blocks[-1]] is not None:
        out["acc_final"] = bl[blocks[-1]][1]
        out["acc_earlier"] = bl[blocks[-1 - back]][1]
        out["accuracy_rises"] = out["acc_final"] > out["acc_earlier"]
    for g, per in s.group_metrics.items():
        ent = [per[b][2] for b in blocks if per[b] is not None]
        out["entropy_ok"][g] = bool(ent) and nonincreasing(ent)
    out["passed"] = out["accuracy_rises"] and all(out["entropy_ok"].values())
    return out


def unroll_cosines(s: RunSummary, group: str = "all", steps=(1, 2)) -> list:
    by = {(r["step"], r["group"]): r for r in s.unroll_rows}
    return [by[(t, group)]["cosine"] for t in steps]


# ---------------------------------------------------------------------------
# sharing at initialisation


SHARING_DESK = ArchitectureConfig("original", [(8, 8), (8, 16), (8, 32)], 8, (3, 16, 16), 10, "conv1x1")
SHARING_VARIANTS = ("unshared", "naive", "ubn_full")


def sharing_at_init(seed: int, config: ArchitectureConfig = SHARING_DESK, share_from: int = 3, batch_size: int = 32) -> dict:
    """Activation growth across the shared span and gradient-norm ratio for each variant, at init.

    Batch statistics are used throughout, as in the first training step.
    The unshared model is measured over the same block span.
    """
    rng = np.random.default_rng([seed, 99])
    x = rng.normal(size=(batch_size,) + config.input_shape)
    y = rng.integers(config.num_classes, size=batch_size)
    out = {}
    for name in SHARING_VARIANTS:
        if name == "unshared":
            m = build_model(config, seed)
            rep = activation_explosion_probe(m, x, "batch", span_start=share_from)
        else:
            m = build_shared_model(config, SharingSpec(share_from, name), seed)
            rep = activation_explosion_probe(m, x, "batch")
        g = grad_norm_ratio(m, (x, y), "batch")
        out[name] = {"growth": rep.max_growth, "ratio": g.ratio, "params": m.parameter_count()}
    return out
