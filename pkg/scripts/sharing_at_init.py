"""Activation growth and gradient-norm ratio at initialisation: unshared vs naive vs UBN sharing.

    python3 scripts/sharing_at_init.py --seeds 0 1 2 3
"""
from __future__ import annotations

import argparse

from resprobe import experiments as ex


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=list(ex.STANDIN_SEEDS))
    ap.add_argument("--share-from", type=int, default=3)
    args = ap.parse_args(argv)
    print(f"{'seed':>4} {'variant':>9} {'growth':>8} {'ratio r':>9} {'params':>8}")
    for seed in args.seeds:
        for name, r in ex.sharing_at_init(seed, share_from=args.share_from).items():
            print(f"{seed:>4} {name:>9} {r['growth']:>8.4f} {r['ratio']:>9.2f} {r['params']:>8}")


if __name__ == "__main__":
    main()
