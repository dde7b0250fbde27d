"""Train the single-representation stand-in for several seeds and report the block-level directions.

    python3 scripts/run_standin.py --data data/digits-n0.3 --out runs/standin --seeds 0 1 2 3
"""
from __future__ import annotations

import argparse
import json
from dataclasses import asdict
from pathlib import Path

from resprobe import experiments as ex
from resprobe import io
from resprobe.cli import load_split, run_train


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", required=True, help="directory written by make_digits_idx.py")
    ap.add_argument("--out", default="runs/standin")
    ap.add_argument("--seeds", type=int, nargs="+", default=list(ex.STANDIN_SEEDS))
    ap.add_argument("--epochs", type=int, default=ex.DIGITS_EPOCHS)
    args = ap.parse_args(argv)
    out = Path(args.out)
    report = []
    for seed in args.seeds:
        cfg = ex.digits_config(args.data, seed, args.epochs)
        run_dir = run_train(cfg, out, force=True)
        model, _ = io.load_checkpoint(run_dir / "final.ckpt")
        s = ex.summarize(model, load_split(cfg.data, "train"), load_split(cfg.data, "val"), cfg.tau, seed=seed)
        first, top = ex.l2_first_vs_top(s)
        bl = ex.borderline_check(s)
        print(f"seed {seed}: train {s.train_acc:.3f} val {s.val_acc:.3f} | top-half cosine {ex.top_half_cosine(s):+.4f} "
              f"| l2 block0 {first:.3f} vs top {top:.3f} | drop gap {100 * ex.drop_gap(s):.1f} pp "
              f"| borderline n={bl['n_borderline']} acc {bl['acc_earlier']}->{bl['acc_final']} "
              f"| unroll cosines {ex.unroll_cosines(s)}")
        d = asdict(s)
        d["group_metrics"] = {g: {str(b): m for b, m in per.items()} for g, per in s.group_metrics.items()}
        report.append(d)
    (out / "standin_report.json").write_text(json.dumps(report, indent=2) + "\n")


if __name__ == "__main__":
    main()
