"""Run the acceptance protocols and write one JSON record per protocol.

    python scripts/run_acceptance.py --out results/ [--only 1 4 10]
"""

import argparse
import json
import sys
from pathlib import Path

from neuraltd import experiments as E
from neuraltd.harness import _clean

# protocol -> criteria it settles
PROTOCOLS = [
    ((1,), lambda out: E.oracle_crosscheck()),
    ((2, 3), lambda out: E.population_assertions(out=out)),
    ((4, 6), lambda out: E.horizon_scaling(out=out)),
    ((5,), lambda out: E.width_scaling(out=out)),
    ((7,), lambda out: E.error_chain()),
    ((8,), lambda out: E.qlearning_scaling(out=out)),
    ((9,), lambda out: E.soft_duality(out=out)),
    ((10,), lambda out: E.kernel_check()),
    ((11,), lambda out: E.deep_linearization()),
    ((12,), lambda out: E.markov_vs_iid(out=out)),
    ((13,), lambda out: E.determinism()),
]


def write(out: Path, tag: str, o: E.Outcome) -> None:
    doc = {"name": o.name, "passed": o.passed, "seconds": o.seconds, "details": o.details}
    (out / f"{tag}.json").write_text(json.dumps(_clean(doc), indent=2) + "\n")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results")
    ap.add_argument("--only", type=int, nargs="*", help="criterion numbers (default: all)")
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    wanted = set(args.only or range(1, 14))
    ok = True
    for criteria, run in PROTOCOLS:
        if not wanted & set(criteria):
            continue
        tag = "criterion_" + "_".join(f"{c:02d}" for c in criteria)
        o = run(out / tag)
        outcomes = [o]
        if 6 in criteria:
            outcomes.append(E.variance_from(o.details.pop("sweeps")))
        for extra in outcomes:
            ok &= extra.passed
            print(f"criteria {','.join(map(str, criteria))}: {extra.line()}", flush=True)
        write(out, tag, o)
        if len(outcomes) > 1:
            write(out, "criterion_06", outcomes[1])
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
