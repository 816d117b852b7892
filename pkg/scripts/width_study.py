"""Width study of the linearization error, semigradient gap and flip fraction.

Runs the population-mode width sweep on a denser grid than the acceptance
check and prints the per-width means and log-log slopes, in population and
i.i.d. mode.

    python scripts/width_study.py --out results/width [--seeds 3 --T 2000]
"""

import argparse

from neuraltd.experiments import ENV_SCALING
from neuraltd.harness import ExperimentSpec, run_experiment

METRICS = ("max_lin_gap", "max_lin_gap_max", "max_gap_sq", "max_flip", "final_err")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=None)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--T", type=int, default=2000)
    ap.add_argument("--widths", type=int, nargs="*", default=[64, 128, 256, 512, 1024, 2048, 4096])
    ap.add_argument("--modes", nargs="*", default=["population", "iid"])
    args = ap.parse_args(argv)
    for mode in args.modes:
        spec = ExperimentSpec(env=ENV_SCALING, algorithm="td", mode=mode, m=tuple(args.widths),
                              T=(args.T,), B=(5.0,), n_seeds=args.seeds)
        out = None if args.out is None else f"{args.out}/{mode}"
        res = run_experiment(spec, out=out, emit_plotdata=out is not None)
        print(f"# mode={mode} T={args.T} seeds={args.seeds}")
        print("m " + " ".join(METRICS))
        for c in res.cells:
            print(c.m, " ".join(f"{c.mean(k):.6g}" for k in METRICS))
        for f in res.fits:
            print(f"slope {f.metric}: {f.slope:.3f} (95% CI {f.ci[0]:.3f}..{f.ci[1]:.3f}, r2 {f.r2:.3f})")


if __name__ == "__main__":
    main()
