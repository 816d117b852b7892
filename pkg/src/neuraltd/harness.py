"""Sweeps over width, horizon, radius and temperature with per-cell CSV traces,
fixed-point JSON files, a summary JSON and log-log slope fits.

Config files are TOML::

    version = 1
    algorithm = "td"            # td | qlearn | softq | sac
    mode = "iid"                # population | iid | markov
    env = "random:d=16"         # generator spec or path to an env JSON
    seed = 0                    # master seed
    n_seeds = 3
    workers = 1

    [grid]
    m = [64, 256]
    T = [2500, 10000]
    B = [5.0]
    beta = [1.0]                # used by softq and sac only

    [run]                       # optional
    eta = 0.01                  # default: the theory stepsize for the mode
    check_every = 10
    burn_in = 1000
    nu_pairs = 200
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats
from threadpoolctl import threadpool_limits

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .algo import (
    SAC_COLUMNS,
    TRACE_COLUMNS,
    ConfigError,
    RunAborted,
    SoftConfig,
    TdConfig,
    neural_q_learning,
    neural_soft_q,
    neural_td,
    soft_actor_critic,
    expected_return,
)
from .env import ChainNotMixing, Policy, load_env, mdp_to_json
from .net import ProjectionSpec, init_two_layer
from .oracle import (
    SolverError,
    estimate_nu,
    ntk_features,
    solve_projected_evaluation,
    solve_projected_optimality,
)

CONFIG_VERSION = 1
ALGORITHMS = ("td", "qlearn", "softq", "sac")
MODES = ("population", "iid", "markov")
ASSERT_TOL = 1e-9
VAR_SLACK = 1.1
RUN_KEYS = ("eta", "check_every", "burn_in", "nu_pairs")


@dataclass(frozen=True)
class ExperimentSpec:
    env: str | dict
    algorithm: str = "td"
    mode: str = "iid"
    m: tuple[int, ...] = (256,)
    T: tuple[int, ...] = (2500,)
    B: tuple[float, ...] = (5.0,)
    beta: tuple[float, ...] = (1.0,)
    n_seeds: int = 1
    seed: int = 0
    workers: int = 1
    eta: float | None = None
    check_every: int | None = None
    burn_in: int = 1000
    nu_pairs: int = 200
    out: str | None = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode == "population" and self.algorithm != "td":
            raise ConfigError("population mode is only defined for td")
        for name in ("m", "T", "B", "beta"):
            grid = getattr(self, name)
            if isinstance(grid, (int, float)):
                grid = (grid,)
            grid = tuple(grid)
            if not grid:
                raise ConfigError(f"grid {name!r} is empty")
            object.__setattr__(self, name, grid)
        if any(int(v) != v or v < 1 for v in self.m):
            raise ConfigError("widths must be positive integers")
        if any(int(v) != v or v < 2 for v in self.T):
            raise ConfigError("horizons must be integers >= 2")
        if any(not v > 0 for v in self.B + self.beta):
            raise ConfigError("B and beta must be positive")
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")

    @property
    def betas(self) -> tuple:
        return self.beta if self.algorithm in ("softq", "sac") else (None,)

    def cells(self) -> list[tuple]:
        """``(m, T, B, beta)`` in grid order."""
        return list(itertools.product(self.m, self.T, self.B, self.betas))

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentSpec":
        doc = dict(doc)
        version = doc.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version!r}")
        grid = doc.pop("grid", {})
        run = doc.pop("run", {})
        unknown = (set(doc) - {f for f in cls.__dataclass_fields__}) | (set(grid) - {"m", "T", "B", "beta"}) \
            | (set(run) - set(RUN_KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "env" not in doc:
            raise ConfigError("config needs an env entry")
        return cls(**doc, **grid, **run)

    @classmethod
    def from_toml(cls, path: str | Path) -> "ExperimentSpec":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            doc = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("m", "T", "B", "beta"):
            d[k] = list(d[k])
        return d


def run_seed(master: int, k: int) -> int:
    """Seed of replicate ``k``; independent of the grid so cells share networks."""
    return int(np.random.SeedSequence([int(master), int(k)]).generate_state(1)[0])


def env_hash(doc: dict) -> str:
    """Git-style blob hash of the canonical env JSON."""
    body = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


# --------------------------------------------------------------------------
# single runs


def make_config(spec: ExperimentSpec, T: int, B: float, beta: float | None, seed: int) -> TdConfig:
    kw = dict(T=T, B=B, sampling=spec.mode, seed=seed, eta=spec.eta,
              check_every=spec.check_every, burn_in=spec.burn_in)
    if spec.algorithm in ("softq", "sac"):
        return SoftConfig(**kw, beta=beta)
    return TdConfig(**kw)


def solve_oracle(algorithm: str, mdp, policy, feats, B: float, beta: float | None):
    spec = ProjectionSpec(B)
    if algorithm == "td":
        return solve_projected_evaluation(mdp, policy, feats, spec)
    if algorithm == "qlearn":
        return solve_projected_optimality(mdp, policy, feats, spec)
    if algorithm == "softq":
        return solve_projected_optimality(mdp, policy, feats, spec, beta=beta)
    return None


def train(algorithm: str, mdp, features, policy, net, config, fp):
    if algorithm == "td":
        return neural_td(mdp, features, policy, net, config, fp)
    if algorithm == "qlearn":
        return neural_q_learning(mdp, features, policy, net, config, fp)
    if algorithm == "softq":
        return neural_soft_q(mdp, features, policy, net, config, fp)
    return soft_actor_critic(mdp, features, net, config)


def assertion_suite(trace, algorithm: str) -> dict:
    """Pass/fail of every per-iteration check recorded in the trace."""
    c = trace.columns
    B = trace.config.B

    def finite(name):
        v = c.get(name)
        return None if v is None else v[np.isfinite(v)]

    out = {"ball": bool(np.all(c["disp"] <= B + ASSERT_TOL))}
    if algorithm == "td":
        mono, desc, var = finite("mono_slack"), finite("descent_slack"), finite("var")
        out["monotonicity"] = bool(np.all(mono >= -ASSERT_TOL)) if mono.size else None
        out["descent"] = bool(np.all(desc >= -ASSERT_TOL)) if desc.size else None
        bound = trace.meta["var_bound"] * VAR_SLACK
        out["variance"] = bool(np.all(var <= bound)) if var.size else None
    if algorithm == "softq":
        gap = finite("soft_gap")
        cap = math.log(trace.meta["n_actions"]) / trace.config.beta
        out["duality"] = bool(np.all((gap >= -1e-12) & (gap <= cap + 1e-12))) if gap.size else None
    return out


def _summarize(trace, algorithm: str, seed: int) -> dict:
    c = trace.columns
    row = {"seed": seed}
    row.update({k: v for k, v in trace.meta.items()})
    if algorithm == "sac":
        return row
    for name in ("lin_gap", "lin_gap_max", "gap_sq", "flip", "disp"):
        v = c[name][np.isfinite(c[name])]
        row[f"max_{name}"] = float(v.max()) if v.size else None
    for name in ("mono_slack", "descent_slack"):
        v = c[name][np.isfinite(c[name])]
        row[f"min_{name}"] = float(v.min()) if v.size else None
    v = c["var"][np.isfinite(c["var"])]
    row["max_var"] = float(v.max()) if v.size else None
    row["n_var_checks"] = int(v.size)
    if algorithm == "softq":
        v = c["soft_gap"][np.isfinite(c["soft_gap"])]
        row["soft_gap_range"] = [float(v.min()), float(v.max())] if v.size else None
    return row


@dataclass
class GroupResult:
    """All horizons of one ``(m, B, beta, seed)`` group; one oracle solve."""

    key: tuple
    csv: dict = field(default_factory=dict)  # T -> csv text
    summaries: dict = field(default_factory=dict)  # T -> summary row
    fixed_point: dict | None = None
    nu: dict | None = None
    error: str | None = None


def _run_group(spec: ExperimentSpec, m: int, B: float, beta, k: int) -> GroupResult:
    seed = run_seed(spec.seed, k)
    res = GroupResult((m, B, beta, k))
    with threadpool_limits(1):
        try:
            mdp, features = load_env(spec.env)
            policy = Policy.uniform(mdp.n_states, mdp.n_actions)
            net = init_two_layer(m, features.d, seed)
            feats = ntk_features(net, features)
            fp = solve_oracle(spec.algorithm, mdp, policy, feats, B, beta)
            if fp is not None:
                res.fixed_point = fp.to_json()
            if spec.algorithm in ("qlearn", "softq"):
                rep = estimate_nu(mdp, policy, feats, ProjectionSpec(B), spec.nu_pairs, seed, beta=beta)
                res.nu = asdict(rep)
            for T in spec.T:
                config = make_config(spec, T, B, beta, seed)
                trace = train(spec.algorithm, mdp, features, policy, net, config, fp)
                extra = {"seed": k}
                res.csv[T] = trace.to_csv(extra=extra, header=False)
                row = _summarize(trace, spec.algorithm, k)
                row["assertions"] = assertion_suite(trace, spec.algorithm)
                if spec.algorithm == "sac":
                    row["uniform_return"] = expected_return(mdp, policy)
                res.summaries[T] = row
        except (SolverError, RunAborted, ChainNotMixing, ValueError, FloatingPointError) as exc:
            res.error = f"{type(exc).__name__}: {exc}"
    return res


# --------------------------------------------------------------------------
# aggregation and fits


@dataclass
class SlopeFit:
    kind: str  # "horizon" or "width"
    metric: str
    fixed: dict
    x: list
    y: list
    slope: float
    intercept: float
    r2: float
    ci: tuple[float, float]

    def within(self, lo: float, hi: float) -> bool:
        return lo <= self.slope <= hi


def fit_loglog(x, y, kind: str, metric: str, fixed: dict) -> SlopeFit:
    """Least-squares line through ``(log x, log y)`` with a 95% interval for the slope."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    if len(lx) == 2:
        slope = float((ly[1] - ly[0]) / (lx[1] - lx[0]))
        return SlopeFit(kind, metric, fixed, list(x), list(y), slope, float(ly[0] - slope * lx[0]),
                        1.0, (math.nan, math.nan))
    fit = stats.linregress(lx, ly)
    half = stats.t.ppf(0.975, len(lx) - 2) * fit.stderr
    return SlopeFit(kind, metric, fixed, list(x), list(y), float(fit.slope), float(fit.intercept),
                    float(fit.rvalue**2), (float(fit.slope - half), float(fit.slope + half)))


@dataclass
class CellResult:
    m: int
    T: int
    B: float
    beta: float | None
    rows: list  # one summary row per seed
    errors: list
    csv_path: str | None = None

    def values(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows if r.get(key) is not None], dtype=float)

    def mean(self, key: str) -> float:
        v = self.values(key)
        return float(v.mean()) if v.size else math.nan

    def stderr(self, key: str) -> float:
        v = self.values(key)
        return float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.nan

    def assertions(self) -> dict:
        out = {}
        for r in self.rows:
            for name, ok in r["assertions"].items():
                if ok is None:
                    continue
                out[name] = out.get(name, True) and ok
        return out


@dataclass
class SweepResult:
    spec: ExperimentSpec
    cells: list[CellResult]
    fits: list[SlopeFit]
    nu: dict
    env_hash: str
    failures: list
    out: Path | None = None

    def cell(self, m=None, T=None, B=None, beta=None) -> CellResult:
        for c in self.cells:
            if (m is None or c.m == m) and (T is None or c.T == T) and (B is None or c.B == B) \
                    and (beta is None or c.beta == beta):
                return c
        raise KeyError((m, T, B, beta))

    def fit(self, kind: str, metric: str) -> SlopeFit:
        for f in self.fits:
            if f.kind == kind and f.metric == metric:
                return f
        raise KeyError((kind, metric))

    @property
    def ok(self) -> bool:
        return not self.failures and all(all(c.assertions().values()) for c in self.cells)


FIT_METRICS = {
    "horizon": ("final_err",),
    "width": ("final_err", "max_lin_gap", "max_gap_sq", "max_flip"),
}


def _fits(spec: ExperimentSpec, cells: list[CellResult]) -> list[SlopeFit]:
    if spec.algorithm == "sac":
        return []
    fits = []
    for kind, axis, others in (("horizon", "T", ("m", "B", "beta")), ("width", "m", ("T", "B", "beta"))):
        if len(getattr(spec, axis)) < 2:
            continue
        groups: dict = {}
        for c in cells:
            groups.setdefault(tuple(getattr(c, o) for o in others), []).append(c)
        for key, members in groups.items():
            members.sort(key=lambda c: getattr(c, axis))
            for metric in FIT_METRICS[kind]:
                x = [getattr(c, axis) for c in members]
                y = [c.mean(metric) for c in members]
                if all(np.isfinite(y)) and all(v > 0 for v in y):
                    fits.append(fit_loglog(x, y, kind, metric, dict(zip(others, key))))
    return fits


def _clean(obj):
    """JSON-safe copy: NaN and inf become null, numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def cell_name(spec: ExperimentSpec, m, T, B, beta) -> str:
    name = f"{spec.algorithm}_{spec.mode}_m{m}_T{T}_B{B:g}"
    return name + (f"_beta{beta:g}" if beta is not None else "")


def run_experiment(spec: ExperimentSpec, out: str | Path | None = None,
                   emit_plotdata: bool = False) -> SweepResult:
    """Run every grid cell for every seed, then aggregate, fit and write outputs."""
    out = out if out is not None else spec.out
    mdp, features = load_env(spec.env)
    env_doc = mdp_to_json(mdp, features)
    groups = [(m, B, beta, k) for m in spec.m for B in spec.B for beta in spec.betas
              for k in range(spec.n_seeds)]
    if spec.workers > 1 and len(groups) > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            futures = [pool.submit(_run_group, spec, *g) for g in groups]
            results = [f.result() for f in futures]  # grid order, not completion order
    else:
        results = [_run_group(spec, *g) for g in groups]
    by_key = {r.key: r for r in results}

    cells, failures, nu = [], [], {}
    for m, T, B, beta in spec.cells():
        rows, errors = [], []
        for k in range(spec.n_seeds):
            r = by_key[(m, B, beta, k)]
            if r.error:
                errors.append({"seed": k, "error": r.error})
            elif T in r.summaries:
                rows.append(r.summaries[T])
            if r.nu is not None:
                nu[f"m{m}_B{B:g}" + (f"_beta{beta:g}" if beta is not None else "") + f"_seed{k}"] = r.nu
        cell = CellResult(m, T, B, beta, rows, errors)
        if errors:
            failures.append({"cell": cell_name(spec, m, T, B, beta), "errors": errors})
        cells.append(cell)
    fits = _fits(spec, cells)
    result = SweepResult(spec, cells, fits, nu, env_hash(env_doc), failures)

    if out is not None:
        out = Path(out)
        result.out = out
        _write_outputs(result, by_key, out, emit_plotdata)
    return result


def _write_outputs(result: SweepResult, by_key: dict, out: Path, emit_plotdata: bool) -> None:
    spec = result.spec
    (out / "cells").mkdir(parents=True, exist_ok=True)
    (out / "fixed_points").mkdir(exist_ok=True)
    for cell in result.cells:
        name = cell_name(spec, cell.m, cell.T, cell.B, cell.beta)
        body = "seed," + ",".join(_trace_columns(spec)) + "\n"
        for k in range(spec.n_seeds):
            body += by_key[(cell.m, cell.B, cell.beta, k)].csv.get(cell.T, "")
        path = out / "cells" / f"{name}.csv"
        path.write_text(body)
        cell.csv_path = str(path)
    for (m, B, beta, k), r in by_key.items():
        if r.fixed_point is not None:
            tag = f"m{m}_B{B:g}" + (f"_beta{beta:g}" if beta is not None else "") + f"_seed{k}"
            (out / "fixed_points" / f"fp_{tag}.json").write_text(json.dumps(_clean(r.fixed_point)))
    summary = {
        "config": spec.to_dict(),
        "env_hash": result.env_hash,
        "seeds": [run_seed(spec.seed, k) for k in range(spec.n_seeds)],
        "cells": [_cell_summary(spec, c) for c in result.cells],
        "fits": [asdict(f) for f in result.fits],
        "nu_hat": result.nu,
        "failures": result.failures,
        "ok": result.ok,
    }
    (out / "summary.json").write_text(json.dumps(_clean(summary), indent=2, sort_keys=True) + "\n")
    if emit_plotdata:
        write_plotdata(result, out / "plotdata")


def _trace_columns(spec: ExperimentSpec):
    return SAC_COLUMNS if spec.algorithm == "sac" else TRACE_COLUMNS


def _cell_summary(spec: ExperimentSpec, c: CellResult) -> dict:
    eta = c.rows[0]["eta"] if c.rows else None
    d = {
        "name": cell_name(spec, c.m, c.T, c.B, c.beta),
        "algorithm": spec.algorithm,
        "mode": spec.mode,
        "m": c.m, "T": c.T, "B": c.B, "beta": c.beta,
        "eta": eta,
        "n_ok": len(c.rows),
        "assertions": c.assertions(),
        "per_seed": c.rows,
        "errors": c.errors,
        "csv": os.path.basename(c.csv_path) if c.csv_path else None,
    }
    key = "final_return" if spec.algorithm == "sac" else "final_err"
    d[key] = {"mean": c.mean(key), "stderr": c.stderr(key)}
    return d


def write_plotdata(result: SweepResult, directory: Path) -> None:
    """Whitespace tables for gnuplot: scaling curves and seed-averaged traces."""
    directory.mkdir(parents=True, exist_ok=True)
    for f in result.fits:
        tag = "_".join(f"{k}{v:g}" for k, v in f.fixed.items() if v is not None)
        lines = [f"# {f.kind} {f.metric} slope={f.slope:.6g} r2={f.r2:.6g}", "# x y"]
        lines += [f"{x:.17g} {y:.17g}" for x, y in zip(f.x, f.y)]
        (directory / f"{f.kind}_{f.metric}_{tag}.dat").write_text("\n".join(lines) + "\n")
    if result.out is None:
        return
    for c in result.cells:
        if c.csv_path is None or not Path(c.csv_path).stat().st_size:
            continue
        data = np.genfromtxt(c.csv_path, delimiter=",", names=True)
        cols = [n for n in data.dtype.names if n != "seed"]
        ts = np.unique(data["t"])
        rows = []
        for t in ts:
            sel = data[data["t"] == t]
            rows.append([t] + [np.nanmean(sel[n]) if np.isfinite(sel[n]).any() else math.nan
                               for n in cols[1:]])
        header = "# " + " ".join(cols)
        body = "\n".join(" ".join(format(v, ".10g") for v in r) for r in rows)
        (directory / f"{Path(c.csv_path).stem}.dat").write_text(header + "\n" + body + "\n")
