"""Command line entry point.

Exit codes: 0 success, 1 configuration error (including unknown flags), 2 runtime
or solver failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .algo import ConfigError, RunAborted
from .env import ChainNotMixing, Policy, estimate_mixing, load_env, stationary_distribution
from .harness import ExperimentSpec, _clean, run_experiment
from .net import ProjectionSpec, init_two_layer, load_checkpoint, save_checkpoint
from .oracle import (
    SolverError,
    estimate_nu,
    kernel_closed_form,
    kernel_mc,
    ntk_features,
    solve_projected_evaluation,
    solve_projected_optimality,
)
from .rng import make_rng

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
DEFAULT_ENV = "random:"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _common(p: argparse.ArgumentParser, env=True):
    p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    p.add_argument("--out", help="output directory (file for oracle)")
    p.add_argument("--config", help="TOML experiment config")
    p.add_argument("--emit-plotdata", action="store_true", help="write gnuplot tables")
    if env:
        p.add_argument("--env", default=None, help="env JSON file or generator spec 'random:k=v,...'")
        p.add_argument("--checkpoint", help="network checkpoint JSON (b and W0 are used)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="neuraltd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in (("td", "neural TD policy evaluation"),
                        ("qlearn", "neural Q-learning"),
                        ("softq", "neural soft Q-learning"),
                        ("sac", "neural soft actor-critic")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.add_argument("--m", type=int, default=256)
        p.add_argument("--T", type=int, default=2500)
        p.add_argument("--B", type=float, default=5.0)
        p.add_argument("--mode", default="population" if name == "td" else "iid")
        p.add_argument("--eta", type=float, default=None)
        p.add_argument("--n-seeds", type=int, default=1)
        if name in ("softq", "sac"):
            p.add_argument("--beta", type=float, default=1.0)
    p = sub.add_parser("oracle", help="projected Bellman fixed point as JSON")
    _common(p)
    p.add_argument("--m", type=int, default=64)
    p.add_argument("--B", type=float, default=5.0)
    p.add_argument("--kind", choices=("evaluation", "optimality", "soft"), default="evaluation")
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--save-checkpoint", help="also write the network used to this JSON file")
    p = sub.add_parser("sweep", help="run a TOML experiment grid")
    _common(p)
    p.add_argument("--workers", type=int, default=None)
    p = sub.add_parser("kernel-check", help="arc-cosine kernel closed form vs Monte Carlo")
    _common(p, env=False)
    p.add_argument("--pairs", type=int, default=100)
    p.add_argument("--n", type=int, default=200_000)
    p.add_argument("--d", type=int, default=8)
    p = sub.add_parser("assumptions", help="empirical nu, mixing fit and flip fraction")
    _common(p)
    p.add_argument("--m", type=int, default=256)
    p.add_argument("--B", type=float, default=5.0)
    p.add_argument("--pairs", type=int, default=200)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--horizon", type=int, default=50)
    return parser


def _emit(doc: dict, out: str | None, name: str) -> None:
    text = json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n"
    if out is None:
        sys.stdout.write(text)
        return
    path = Path(out)
    if path.suffix != ".json":
        path.mkdir(parents=True, exist_ok=True)
        path = path / name
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


def _network(args, d: int):
    if args.checkpoint:
        net = load_checkpoint(args.checkpoint)
        if net.d != d:
            raise ConfigError(f"checkpoint input dimension {net.d} != env dimension {d}")
        return net.with_weights(net.W0)
    return init_two_layer(args.m, d, _seed(args))


def _load_env(args):
    try:
        return load_env(args.env or DEFAULT_ENV)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load env {args.env!r}: {exc}") from exc


def cmd_train(args) -> int:
    if args.config:
        spec = ExperimentSpec.from_toml(args.config)
        overrides = {"algorithm": args.command}
        if args.env:
            overrides["env"] = args.env
        if args.seed is not None:
            overrides["seed"] = args.seed
        spec = ExperimentSpec(**{**spec.to_dict(), **overrides})
    else:
        spec = ExperimentSpec(env=args.env or DEFAULT_ENV, algorithm=args.command, mode=args.mode,
                              m=(args.m,), T=(args.T,), B=(args.B,),
                              beta=(getattr(args, "beta", 1.0),), n_seeds=args.n_seeds,
                              seed=_seed(args), eta=args.eta)
    if args.checkpoint:
        raise ConfigError("--checkpoint applies to the oracle and assumptions commands")
    if isinstance(spec.env, str):
        _load_env(argparse.Namespace(env=spec.env))  # fail early with exit code 1
    result = run_experiment(spec, out=args.out, emit_plotdata=args.emit_plotdata)
    summary = [{"cell": f"m{c.m}_T{c.T}_B{c.B:g}", "final_err": c.mean("final_err"),
                "final_return": c.mean("final_return"), "assertions": c.assertions()}
               for c in result.cells]
    if args.out is None:
        _emit({"cells": summary, "failures": result.failures}, None, "")
    if result.failures:
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_oracle(args) -> int:
    mdp, features = _load_env(args)
    net = _network(args, features.d)
    policy = Policy.uniform(mdp.n_states, mdp.n_actions)
    feats = ntk_features(net, features)
    spec = ProjectionSpec(args.B)
    if args.kind == "evaluation":
        fp = solve_projected_evaluation(mdp, policy, feats, spec, tol=args.tol)
    else:
        beta = args.beta if args.kind == "soft" else None
        fp = solve_projected_optimality(mdp, policy, feats, spec, tol=args.tol, beta=beta)
    _emit(fp.to_json(), args.out, "fixed_point.json")
    if args.save_checkpoint:
        save_checkpoint(args.save_checkpoint, net)
    return EXIT_OK


def cmd_sweep(args) -> int:
    if not args.config:
        raise ConfigError("sweep needs --config")
    spec = ExperimentSpec.from_toml(args.config)
    changes = {} if args.seed is None else {"seed": args.seed}
    if args.env:
        changes["env"] = args.env
    if args.workers:
        changes["workers"] = args.workers
    spec = ExperimentSpec(**{**spec.to_dict(), **changes})
    out = args.out or spec.out
    if out is None:
        raise ConfigError("sweep needs --out or an out entry in the config")
    result = run_experiment(spec, out=out, emit_plotdata=args.emit_plotdata)
    return EXIT_OK if not result.failures else EXIT_RUNTIME


def _unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def cmd_kernel(args) -> int:
    if args.pairs < 1 or args.n < 2 or args.d < 2:
        raise ConfigError("need pairs >= 1, n >= 2 and d >= 2")
    seed = _seed(args)
    rng = make_rng(seed, "kernel-check")
    rows, worst = [], 0.0
    for k in range(args.pairs):
        x, y = _unit(rng, args.d), _unit(rng, args.d)
        exact = kernel_closed_form(x, y)
        est, se = kernel_mc(x, y, args.n, seed * 100003 + k)
        z = abs(est - exact) / se if se > 0 else (0.0 if est == exact else math.inf)
        worst = max(worst, z)
        rows.append({"pair": k, "cos": float(x @ y), "closed_form": exact, "mc": est, "stderr": se, "z": z})
    e = np.eye(args.d)
    y60 = 0.5 * e[0] + math.sqrt(0.75) * e[1]
    analytic = {"same": kernel_closed_form(e[0], e[0]), "opposite": kernel_closed_form(e[0], -e[0]),
                "sixty_degrees": kernel_closed_form(e[0], y60)}
    ok = worst <= 4.0
    _emit({"pairs": rows, "max_z": worst, "analytic": analytic, "ok": ok}, args.out, "kernel_check.json")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_assumptions(args) -> int:
    mdp, features = _load_env(args)
    net = _network(args, features.d)
    policy = Policy.uniform(mdp.n_states, mdp.n_actions)
    feats = ntk_features(net, features)
    spec = ProjectionSpec(args.B)
    mu = stationary_distribution(mdp, policy)
    rep = estimate_nu(mdp, policy, feats, spec, args.pairs, _seed(args), beta=args.beta, mu=mu)
    curve = estimate_mixing(mdp, policy, args.horizon)
    # flip fraction along a random direction at the ball boundary
    rng = make_rng(_seed(args), "assumptions", "direction")
    u = rng.standard_normal(net.W0.shape)
    W = net.W0 + args.B * u / np.linalg.norm(u)
    radius = np.linalg.norm(W - net.W0, axis=1)
    flip = float(mu.probs @ np.mean(np.abs(features.matrix @ net.W0.T) <= radius, axis=1))
    doc = {
        "nu_hat": rep.nu_hat, "min_ratio": rep.min_ratio, "n_pairs": rep.n_pairs,
        "n_degenerate": rep.n_degenerate, "softmax_beta": args.beta,
        "mixing": {"beta": curve.beta, "iota": curve.iota, "mixing": curve.mixing,
                   "tv": curve.tv.tolist()},
        "flip_fraction_at_B": flip, "m": net.m, "B": args.B,
    }
    _emit(doc, args.out, "assumptions.json")
    return EXIT_OK


COMMANDS = {"td": cmd_train, "qlearn": cmd_train, "softq": cmd_train, "sac": cmd_train,
            "oracle": cmd_oracle, "sweep": cmd_sweep, "kernel-check": cmd_kernel,
            "assumptions": cmd_assumptions}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, RunAborted, ChainNotMixing, FloatingPointError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
