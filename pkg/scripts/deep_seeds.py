"""Seed sensitivity of the multi-layer linearization check.

    python scripts/deep_seeds.py --seeds 10 [--mode iid --T 2000 --B 1]
"""

import argparse

from neuraltd.experiments import deep_linearization


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--mode", default="iid")
    ap.add_argument("--T", type=int, default=2000)
    ap.add_argument("--B", type=float, default=1.0)
    args = ap.parse_args(argv)
    o = deep_linearization(n_seeds=args.seeds, mode=args.mode, T=args.T, B=args.B)
    print(o.line())
    print("means per width (32, 64, 128):", [f"{v:.4g}" for v in o.details["means"]])


if __name__ == "__main__":
    main()
