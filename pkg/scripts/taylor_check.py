"""Second-order Taylor residuals of the downstream loss for every block of a checkpoint.

    python3 scripts/taylor_check.py runs/standin/digits-single-s0/final.ckpt --samples 300
"""
from __future__ import annotations

import argparse

import numpy as np

from resprobe import io
from resprobe.cli import load_split
from resprobe.config import DataConfig
from resprobe.probes import taylor_residual_check


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("--split", default="train")
    ap.add_argument("--samples", type=int, default=None)
    args = ap.parse_args(argv)
    model, header = io.load_checkpoint(args.checkpoint)
    data = load_split(DataConfig(**header["extra"]["config"]["data"]), args.split)
    if args.samples:
        data = data.subset(np.arange(min(args.samples, len(data))))
    print(f"{'block':>5} {'kink-free':>9} {'median slope':>12} {'median flips':>12}")
    for i in range(model.n_blocks):
        rep = taylor_residual_check(model, data, i)
        fin = rep.slopes[np.isfinite(rep.slopes)]
        med = float(np.median(fin)) if fin.size else float("nan")
        flips = int(np.median(rep.flips)) if rep.flips is not None else -1
        print(f"{i:>5} {int(rep.kink_free.sum()):>9} {med:>12.3f} {flips:>12}")


if __name__ == "__main__":
    main()
