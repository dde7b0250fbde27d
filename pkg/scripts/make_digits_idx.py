"""Export scikit-learn's bundled 8x8 digits as IDX files.

The digits set ships with scikit-learn, so this works offline.  Optional
Gaussian pixel noise (fixed seed, clipped to the byte range) makes the
task hard enough that a trained net keeps some low-margin examples.

    python3 scripts/make_digits_idx.py --out data/digits --noise 0.3
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from resprobe.data import write_idx

TRAIN_SIZE = 1200


def export_digits(out_dir, noise: float = 0.0, seed: int = 0) -> dict:
    """Write train/held-out IDX pairs; returns their paths."""
    from sklearn.datasets import load_digits

    d = load_digits()
    x = d.images / 16.0
    if noise > 0:
        x = x + np.random.default_rng([seed, 1]).normal(0.0, noise, x.shape)
    pixels = np.clip(np.rint(x * 255), 0, 255).astype(np.uint8)
    order = np.random.default_rng(seed).permutation(len(d.target))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, idx in (("train", order[:TRAIN_SIZE]), ("test", order[TRAIN_SIZE:])):
        img = out / f"{split}-images-idx3-ubyte"
        write_idx(img, pixels[idx])
        write_idx(out / f"{split}-labels-idx1-ubyte", d.target[idx].astype(np.uint8))
        paths[split] = img
    return paths


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/digits")
    ap.add_argument("--noise", type=float, default=0.0, help="pixel noise std on the [0, 1] scale")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    for split, path in export_digits(args.out, args.noise, args.seed).items():
        print(f"{split}: {path}")


if __name__ == "__main__":
    main()
