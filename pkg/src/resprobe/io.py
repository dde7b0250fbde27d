"""Checkpoints and CSV outputs.

Checkpoint layout: the 8-byte magic ``RPROBE\\x00\\x01``, a little-endian
uint64 header length, a UTF-8 JSON header with sorted keys, then every
array in header order as little-endian float64.  Saving the same model
twice produces identical bytes.
"""
from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .nn import ArchitectureConfig, Model, build_model
from .share_unroll import SharingSpec, build_shared_model

MAGIC = b"RPROBE\x00\x01"
CHECKPOINT_VERSION = 1
SCHEMA_VERSION = 1

METRICS_COLUMNS = ("schema_version", "run_id", "epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc")
PROBES_COLUMNS = ("schema_version", "run_id", "epoch", "split", "probe", "block", "stage", "value", "n_excluded")
UNROLL_COLUMNS = ("schema_version", "run_id", "step", "split", "group", "loss", "accuracy", "entropy", "cosine", "l2_ratio")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: Model, epoch: int = 0, extra: dict | None = None) -> None:
    params = model.named_parameters()
    buffers = model.named_buffers()
    arrays = [("param", k, v.data) for k, v in params.items()] + [("buffer", k, v) for k, v in buffers.items()]
    header = {
        "version": CHECKPOINT_VERSION,
        "architecture": model.config.to_dict(),
        "sharing": None if model.sharing is None else model.sharing.to_dict(),
        "seed": model.seed,
        "epoch": int(epoch),
        "arrays": [{"kind": kind, "name": name, "shape": list(a.shape)} for kind, name, a in arrays],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[dict, dict]:
    """(header, name -> array) without building a model."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + n].decode("utf-8"))
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    offset = 16 + n
    arrays = {}
    for entry in header["arrays"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        end = offset + 8 * size
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated at array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, arrays


def load_checkpoint(path) -> tuple[Model, dict]:
    """Rebuild the model described by the header and restore its state."""
    header, arrays = read_checkpoint(path)
    config = ArchitectureConfig.from_dict(header["architecture"])
    if header["sharing"] is None:
        model = build_model(config, header["seed"])
    else:
        model = build_shared_model(config, SharingSpec(**header["sharing"]), header["seed"])
    params = model.named_parameters()
    buffers = model.named_buffers()
    expected = set(params) | set(buffers)
    if expected != set(arrays):
        missing = sorted(expected - set(arrays))
        unexpected = sorted(set(arrays) - expected)
        raise CheckpointError(f"{path}: architecture mismatch; missing {missing[:5]}, unexpected {unexpected[:5]}")
    for name, t in params.items():
        if arrays[name].shape != t.data.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
        t.data[...] = arrays[name]
    for name in buffers:
        model.set_buffer(name, arrays[name].copy())
    return model, header


# ---------------------------------------------------------------------------
# CSV


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


class CsvLog:
    """Append-only CSV with a fixed header and a schema_version column."""

    def __init__(self, path, columns):
        self.path = Path(path)
        self.columns = tuple(columns)
        if not self.path.exists():
            with open(self.path, "w", newline="", encoding="utf-8") as fh:
                csv.writer(fh, lineterminator="\n").writerow(self.columns)

    def write(self, rows) -> None:
        with open(self.path, "a", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in rows:
                row = dict(row, schema_version=SCHEMA_VERSION)
                unknown = set(row) - set(self.columns)
                if unknown:
                    raise KeyError(f"unknown columns for {self.path.name}: {sorted(unknown)}")
                w.writerow([_cell(row.get(c)) for c in self.columns])


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
