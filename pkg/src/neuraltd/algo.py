"""Neural TD, neural (soft) Q-learning and neural soft actor-critic.

All loops share one skeleton: semigradient step, projection onto the ball
around ``W(0)``, and the recursive average of the iterates. Each iteration
writes one row of exact metrics measured against a projected fixed point.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg.blas import daxpy, dger, dscal

from .env import (
    ChainNotMixing,
    FeatureMap,
    FiniteMdp,
    Policy,
    StationaryDist,
    Transition,
    iid_stream,
    markov_stream,
    sample_iid,
    stationary_distribution,
)
from .net import (
    DeepParams,
    ProjectionSpec,
    TwoLayerParams,
    deep_forward,
    deep_grad,
    project_ball,
    project_layerwise,
    q_values,
)
from .oracle import (
    FixedPoint,
    bellman_eval,
    bellman_opt,
    ntk_features,
    q_pi_exact,
    softmax_value,
    solve_projected_evaluation,
    solve_projected_optimality,
)
from .rng import make_rng

SAMPLING_MODES = ("population", "iid", "markov")
RESYNC = 100

TRACE_COLUMNS = (
    "t",
    "dist_star",  # ||W(t) - W*||
    "lin_err",  # E_mu[(Q0(x; W(t)) - Q0(x; W*))^2]
    "net_err",  # E_mu[(Q(x; W(t)) - Q0(x; W*))^2]
    "lin_gap",  # E_mu[(Q(x; W(t)) - Q0(x; W(t)))^2]
    "lin_gap_max",  # max_x |Q(x; W(t)) - Q0(x; W(t))|
    "flip",  # E_mu[flip fraction]
    "disp",  # ||W(t) - W(0)||
    "delta",  # residual used in the step (population: E_mu of it)
    "delta_sq",
    "g_norm",  # norm of the applied semigradient
    "gap_sq",  # ||gbar - gbar0||^2
    "mono_slack",  # (gbar0 - gbar0*).(W - W*) - (1 - gamma) lin_err
    "descent_slack",  # rhs - lhs of the population descent inequality
    "var",  # E||g - gbar||^2
    "soft_gap",  # softmax - max at the next state (soft Q-learning only)
)

SAC_COLUMNS = ("t", "xi", "kl", "disp", "g_norm", "v_mean", "expected_return")


class ConfigError(ValueError):
    pass


class RunAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class TdConfig:
    T: int
    B: float
    sampling: str = "population"
    seed: int = 0
    eta: float | None = None
    check_every: int | None = None
    burn_in: int = 1000

    def __post_init__(self):
        if self.T < 2:
            raise ConfigError("T must be at least 2")
        if self.sampling not in SAMPLING_MODES:
            raise ConfigError(f"unknown sampling mode {self.sampling!r}")
        if self.eta is not None and self.eta < 0:
            raise ConfigError("stepsize must be non-negative")
        ProjectionSpec(self.B)

    @property
    def spec(self) -> ProjectionSpec:
        return ProjectionSpec(self.B)

    def stepsize(self, gamma: float) -> float:
        if self.eta is not None:
            return self.eta
        return default_stepsize(gamma, self.T, self.sampling)

    @property
    def checks_every(self) -> int:
        if self.check_every is not None:
            return self.check_every
        return 1 if self.sampling == "population" else 10


@dataclass(frozen=True)
class SoftConfig(TdConfig):
    beta: float = 1.0

    def __post_init__(self):
        super().__post_init__()
        if not self.beta > 0:
            raise ConfigError("beta must be positive")


def default_stepsize(gamma: float, T: int, sampling: str) -> float:
    if sampling == "population":
        return (1 - gamma) / 8
    return min((1 - gamma) / 8, 1 / math.sqrt(T))


@dataclass
class RunTrace:
    columns: dict[str, np.ndarray]
    W_bar: np.ndarray
    W_final: np.ndarray
    net: TwoLayerParams
    config: TdConfig
    meta: dict = field(default_factory=dict)
    pi_out: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.columns["t"])

    def q_out(self, X: np.ndarray) -> np.ndarray:
        return q_values(self.net, X, self.W_bar)

    def to_csv(self, fh=None, extra: dict | None = None, header: bool = True) -> str:
        """Write one row per iteration; floats use 17 significant digits."""
        extra = extra or {}
        buf = io.StringIO() if fh is None else fh
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(list(extra) + list(self.columns))
        cols = [self.columns[k] for k in self.columns]
        for i in range(len(self)):
            row = [str(v) for v in extra.values()]
            row += [_fmt(c[i]) for c in cols]
            w.writerow(row)
        return buf.getvalue() if fh is None else ""


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


# --------------------------------------------------------------------------
# residuals and semigradients


def _x(features: FeatureMap, s: int, a: int) -> np.ndarray:
    return features.table[s, a]


def residual_delta(net: TwoLayerParams, W: np.ndarray, tup: Transition, features: FeatureMap,
                   gamma: float) -> float:
    if tup.a_next is None:
        raise ValueError("tuple carries no next action")
    x, x2 = _x(features, tup.s, tup.a), _x(features, tup.s_next, tup.a_next)
    q = q_values(net, np.stack([x, x2]), W)
    return float(q[0] - tup.r - gamma * q[1])


def residual_delta0(net: TwoLayerParams, W: np.ndarray, tup: Transition, features: FeatureMap,
                    gamma: float) -> float:
    if tup.a_next is None:
        raise ValueError("tuple carries no next action")
    X = np.stack([_x(features, tup.s, tup.a), _x(features, tup.s_next, tup.a_next)])
    active = X @ net.W0.T > 0
    q = (active * (X @ W.T)) @ net.b / math.sqrt(net.m)
    return float(q[0] - tup.r - gamma * q[1])


def semigradient_stochastic(net: TwoLayerParams, W: np.ndarray, tup: Transition,
                            features: FeatureMap, gamma: float) -> np.ndarray:
    x = _x(features, tup.s, tup.a)
    delta = residual_delta(net, W, tup, features, gamma)
    coef = net.b * (W @ x > 0) / math.sqrt(net.m)
    return delta * np.outer(coef, x)


def _population(net, W, mdp, X, mu, policy, linear: bool, target: str = "eval", beta=None):
    """Exact expected semigradient; returns (gbar, q table, residual table)."""
    Z = X @ W.T
    mask = (X @ net.W0.T > 0) if linear else (Z > 0)
    q = ((mask * Z) if linear else np.maximum(Z, 0.0)) @ net.b / math.sqrt(net.m)
    q = q.reshape(mdp.n_states, mdp.n_actions)
    if target == "eval":
        tq = bellman_eval(mdp, policy, q)
    else:
        tq = bellman_opt(mdp, q, beta if target == "soft" else None)
    resid = (q - tq).ravel()
    g = (net.b / math.sqrt(net.m))[:, None] * ((mask.T * (mu.probs * resid)) @ X)
    return g, q, resid


def semigradient_population(net: TwoLayerParams, W: np.ndarray, mdp: FiniteMdp,
                            features: FeatureMap, mu: StationaryDist, policy: Policy) -> np.ndarray:
    return _population(net, W, mdp, features.matrix, mu, policy, linear=False)[0]


def semigradient_linearized_population(net: TwoLayerParams, W: np.ndarray, mdp: FiniteMdp,
                                       features: FeatureMap, mu: StationaryDist,
                                       policy: Policy) -> np.ndarray:
    return _population(net, W, mdp, features.matrix, mu, policy, linear=True)[0]


def semigradient_variance(net: TwoLayerParams, W: np.ndarray, mdp: FiniteMdp,
                          features: FeatureMap, mu: StationaryDist, policy: Policy) -> float:
    """Exact ``E||g - gbar||^2`` of the TD semigradient under i.i.d. sampling."""
    X = features.matrix
    Z = X @ W.T
    active = Z > 0
    q = (np.maximum(Z, 0.0) @ net.b / math.sqrt(net.m)).reshape(mdp.n_states, mdp.n_actions)
    ev = mdp.transition @ np.sum(policy.probs * q, axis=1)
    ev2 = mdp.transition @ np.sum(policy.probs * q * q, axis=1)
    c = q - mdp.reward
    e_delta_sq = (c * c - 2 * mdp.gamma * c * ev + mdp.gamma**2 * ev2).ravel()
    grad_sq = active.sum(axis=1) / net.m
    e_g_sq = float(np.dot(mu.probs, e_delta_sq * grad_sq))
    gbar = semigradient_population(net, W, mdp, features, mu, policy)
    return e_g_sq - float(np.sum(gbar * gbar))


def variance_bound(net: TwoLayerParams, mdp: FiniteMdp, features: FeatureMap,
                   mu: StationaryDist, B: float) -> float:
    """``12 E[Q(x; W0)^2] + 12 B^2 + 3 r_bar^2``."""
    q0 = q_values(net, features.matrix, net.W0)
    return 12 * float(np.dot(mu.probs, q0 * q0)) + 12 * B * B + 3 * mdp.r_bar**2


# --------------------------------------------------------------------------
# the shared training loop


def _rank_one_update(A: np.ndarray, alpha: float, u: np.ndarray, v: np.ndarray) -> None:
    """``A += alpha u v^T`` in place (BLAS ger on the Fortran-ordered transpose)."""
    out = dger(alpha, v, u, a=A.T, overwrite_a=1)
    if not np.shares_memory(out, A):
        A[...] = out.T


def _tuple_stream(mdp, policy, mu, config, n):
    rng = make_rng(config.seed, "sampling")
    if config.sampling == "iid":
        return iid_stream(mdp, policy, mu, rng, n)
    # markov: burn in from a fixed start state, then record
    burn = markov_stream((0, 0), mdp, policy, rng, config.burn_in) if config.burn_in else None
    start = (0, 0) if burn is None else (int(burn[-1, 2]), int(burn[-1, 3]))
    return markov_stream(start, mdp, policy, rng, n)


def _run(mdp: FiniteMdp, features: FeatureMap, policy: Policy, net: TwoLayerParams,
         config: TdConfig, fp: FixedPoint, target: str, beta: float | None) -> RunTrace:
    # The loop works on the displacement D = W - W(0) so that each stochastic
    # step touches the (m, d) arrays as few times as possible.
    X = features.matrix
    nA = mdp.n_actions
    mu = stationary_distribution(mdp, policy)
    B = config.B
    eta = config.stepsize(mdp.gamma)
    gamma = mdp.gamma
    sq_m = math.sqrt(net.m)
    b_scaled = net.b / sq_m
    W0 = net.W0
    Z0 = X @ W0.T
    mask0 = Z0 > 0
    absZ0 = np.abs(Z0)
    q_star = fp.q_values.ravel()
    W_star = fp.W_star
    D_star = W_star - W0
    w_mu = mu.probs
    reward = mdp.reward.ravel()

    n = config.T - 1
    cols = {k: np.full(n, np.nan) for k in TRACE_COLUMNS}
    cols["t"] = np.arange(n)
    stochastic = config.sampling != "population"
    stream = _tuple_stream(mdp, policy, mu, config, n) if stochastic else None
    check_every = config.checks_every
    td_checks = target == "eval"
    if td_checks:
        g0_star = _population(net, W_star, mdp, X, mu, policy, linear=True)[0]
        var_cap = variance_bound(net, mdp, features, mu, B)

    D = np.zeros_like(W0)
    D_bar = np.zeros_like(W0)
    buf = np.empty_like(W0)  # scratch; fresh (m, d) temporaries dominate the step cost
    # Stochastic steps are rank one, so X D^T, the row norms of D and <D, D*>
    # are carried along in O(n m) and re-synced exactly every RESYNC steps.
    DsX = X @ D_star.T
    ds_sq = float(np.sum(D_star * D_star))
    x_sq = np.einsum("ij,ij->i", X, X)
    XX = X @ X.T
    lin_rows = mask0 * b_scaled  # q_lin = lin_rows . Z row by row
    base_lin = np.einsum("ij,ij->i", lin_rows, Z0)
    Z = np.empty_like(Z0)
    relu = np.empty_like(Z0)
    flips = np.empty(Z0.shape, dtype=bool)
    D_flat, D_bar_flat = D.reshape(-1), D_bar.reshape(-1)
    for t in range(n):
        on_grid = t % check_every == 0
        check = td_checks and on_grid
        # every loop re-syncs on the same schedule, so single-action Q-learning
        # reproduces TD bit for bit
        if not stochastic or on_grid or t % RESYNC == 0:
            ZD = X @ D.T
            row_sq = np.einsum("ij,ij->i", D, D)
            cross = float(np.vdot(D, D_star))
            dist_star = np.linalg.norm(np.subtract(D, D_star, out=buf))
            np.add(Z0, ZD, out=Z)
            q_lin = np.einsum("ij,ij->i", lin_rows, Z)
        else:
            dist_star = math.sqrt(max(row_sq.sum() - 2 * cross + ds_sq, 0.0))
            np.add(Z0, ZD, out=Z)
        q_net = np.maximum(Z, 0.0, out=relu) @ b_scaled
        lin_err = np.dot(w_mu, (q_lin - q_star) ** 2)
        cols["dist_star"][t] = dist_star
        cols["lin_err"][t] = lin_err
        cols["net_err"][t] = np.dot(w_mu, (q_net - q_star) ** 2)
        gap = q_net - q_lin
        cols["lin_gap"][t] = np.dot(w_mu, gap * gap)
        cols["lin_gap_max"][t] = np.abs(gap).max()
        np.less_equal(absZ0, np.sqrt(row_sq), out=flips)
        cols["flip"][t] = np.dot(w_mu, [np.count_nonzero(f) for f in flips]) / net.m
        cols["disp"][t] = math.sqrt(row_sq.sum())

        W = W0 + D if (check or not stochastic) else None
        if stochastic:
            s, a, s2, a2 = stream[t]
            i = s * nA + a
            if target == "eval":
                q_next = q_net[s2 * nA + a2]
            else:
                q_row = q_net[s2 * nA:(s2 + 1) * nA]
                q_next = q_row.max()
                if target == "soft":
                    q_soft = softmax_value(q_row, beta)
                    cols["soft_gap"][t] = q_soft - q_next
                    q_next = q_soft
            delta = q_net[i] - reward[i] - gamma * q_next
            coef = b_scaled * (Z[i] > 0)
            cols["delta"][t] = delta
            cols["delta_sq"][t] = delta * delta
            # ||coef x^T|| = ||coef|| ||x||
            cols["g_norm"][t] = abs(delta) * np.linalg.norm(coef) * np.linalg.norm(X[i])
        else:
            g, _, resid = _population(net, W, mdp, X, mu, policy, linear=False)
            cols["delta"][t] = np.dot(w_mu, resid)
            cols["delta_sq"][t] = np.dot(w_mu, resid * resid)
            cols["g_norm"][t] = np.linalg.norm(g)

        if check:
            gbar = g if not stochastic else _population(net, W, mdp, X, mu, policy, False)[0]
            g0 = _population(net, W, mdp, X, mu, policy, linear=True)[0]
            diff = gbar - g0
            gap_sq = float(np.sum(diff * diff))
            cols["gap_sq"][t] = gap_sq
            cols["mono_slack"][t] = np.sum((g0 - g0_star) * (W - W_star)) - (1 - gamma) * lin_err
            cols["var"][t] = semigradient_variance(net, W, mdp, features, mu, policy)

        # semigradient step and projection, in place on D
        if stochastic:
            alpha = -(eta * delta)
            _rank_one_update(D, alpha, coef, X[i])
            row_sq += coef * (2 * alpha * ZD[i] + alpha * alpha * x_sq[i] * coef)
            cross += alpha * float(coef @ DsX[i])
            u = alpha * XX[:, i]
            q_lin += u * (lin_rows @ coef)
            _rank_one_update(ZD, 1.0, u, coef)
            norm = math.sqrt(row_sq.sum())
        else:
            D -= eta * g
            norm = np.linalg.norm(D)
        if norm > B:
            scale = B / norm
            D *= scale
            if stochastic:
                ZD *= scale
                row_sq *= scale * scale
                cross *= scale
                q_lin = base_lin + scale * (q_lin - base_lin)

        if check and not stochastic:
            lhs = np.linalg.norm(np.subtract(D, D_star, out=buf)) ** 2
            rhs = (dist_star**2
                   - (2 * eta * (1 - gamma) - 8 * eta * eta) * lin_err
                   + 2 * eta * eta * gap_sq + 2 * eta * B * math.sqrt(gap_sq))
            cols["descent_slack"][t] = rhs - lhs

        # W_bar <- (t+1)/(t+2) W_bar + W(t+1)/(t+2), written for the displacement
        dscal((t + 1) / (t + 2), D_bar_flat)
        daxpy(D_flat, D_bar_flat, a=1.0 / (t + 2))

    meta = {"eta": eta, "B": B, "m": net.m, "T": config.T, "mode": config.sampling,
            "n_actions": nA, "burn_in": config.burn_in if config.sampling == "markov" else 0}
    if td_checks:
        meta["var_bound"] = var_cap
    W_bar = W0 + D_bar
    q_out = q_values(net, X, W_bar)
    meta["final_err"] = float(np.dot(w_mu, (q_out - q_star) ** 2))
    return RunTrace(cols, W_bar, W0 + D, net, config, meta)


def neural_td(mdp: FiniteMdp, features: FeatureMap, policy: Policy, net: TwoLayerParams,
              config: TdConfig, fixed_point: FixedPoint | None = None) -> RunTrace:
    """Projected, averaged TD(0) with the two-layer network."""
    if fixed_point is None:
        fixed_point = solve_projected_evaluation(mdp, policy, ntk_features(net, features), config.spec)
    return _run(mdp, features, policy, net, config, fixed_point, "eval", None)


def _check_exploration(pi_exp: Policy, config: TdConfig):
    if not pi_exp.is_exploratory:
        raise ConfigError("exploration policy must be positive everywhere")
    if config.sampling == "population":
        raise ConfigError("population mode is only defined for TD")


def neural_q_learning(mdp: FiniteMdp, features: FeatureMap, pi_exp: Policy, net: TwoLayerParams,
                      config: TdConfig, fixed_point: FixedPoint | None = None) -> RunTrace:
    """Greedy next action under the current network; ties go to the lowest index."""
    _check_exploration(pi_exp, config)
    if fixed_point is None:
        fixed_point = solve_projected_optimality(mdp, pi_exp, ntk_features(net, features), config.spec)
    return _run(mdp, features, pi_exp, net, config, fixed_point, "max", None)


def neural_soft_q(mdp: FiniteMdp, features: FeatureMap, pi_exp: Policy, net: TwoLayerParams,
                  config: SoftConfig, fixed_point: FixedPoint | None = None) -> RunTrace:
    _check_exploration(pi_exp, config)
    if fixed_point is None:
        fixed_point = solve_projected_optimality(mdp, pi_exp, ntk_features(net, features),
                                                 config.spec, beta=config.beta)
    return _run(mdp, features, pi_exp, net, config, fixed_point, "soft", config.beta)


# --------------------------------------------------------------------------
# soft actor-critic


def boltzmann(q: np.ndarray, beta: float, prior: np.ndarray | None = None) -> np.ndarray:
    """``pi(a|s) ∝ prior(a|s) exp(beta q(s, a))``, row-normalized."""
    prior = np.full_like(q, 1.0 / q.shape[1]) if prior is None else prior
    logits = beta * q + np.log(prior)
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def soft_state_value(q: np.ndarray, beta: float) -> np.ndarray:
    """``beta^-1 log E_{a ~ uniform}[exp(beta q(s, a))]``."""
    return softmax_value(q, beta) - math.log(q.shape[-1]) / beta


def _kl_uniform(p: np.ndarray) -> np.ndarray:
    n = p.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p * n), 0.0)
    return terms.sum(axis=-1)


def soft_actor_critic(mdp: FiniteMdp, features: FeatureMap, net: TwoLayerParams,
                      config: SoftConfig, return_every: int | None = None) -> RunTrace:
    """Actor and critic share the network; sampling uses the exact stationary law of ``pi_t``."""
    if config.sampling == "population":
        raise ConfigError("soft actor-critic is sample based")
    X = features.matrix
    nS, nA = mdp.n_states, mdp.n_actions
    beta, gamma = config.beta, mdp.gamma
    eta = config.stepsize(gamma)
    spec = config.spec
    rng = make_rng(config.seed, "sampling")
    sq_m = math.sqrt(net.m)
    return_every = return_every or config.checks_every
    n = config.T - 1
    cols = {k: np.full(n, np.nan) for k in SAC_COLUMNS}
    cols["t"] = np.arange(n)
    W = net.W0.copy()
    W_bar = W.copy()
    for t in range(n):
        Z = X @ W.T
        q = (np.maximum(Z, 0.0) @ net.b / sq_m).reshape(nS, nA)
        pi = boltzmann(q, beta)
        policy = Policy(pi)
        try:
            mu_t = stationary_distribution(mdp, policy)
        except ChainNotMixing as exc:
            raise RunAborted(f"iteration {t}: stationary law of pi_t not found ({exc})") from exc
        tup = sample_iid(mdp, policy, mu_t, rng)
        s, a, s2 = tup.s, tup.a, tup.s_next
        v = soft_state_value(q, beta)
        kl = _kl_uniform(pi[s])
        xi = tup.r - kl / beta + gamma * v[s2] - v[s]

        rows = slice(s * nA, (s + 1) * nA)
        act = Z[rows] > 0  # (nA, m)
        grads = (act * net.b / sq_m)[:, :, None] * X[rows][:, None, :]  # dQ(s, a')/dW
        grad_v = np.tensordot(pi[s], grads, axes=1)
        grad_logpi = beta * (grads - grad_v)  # per action
        log_ratio = np.log(pi[s] * nA)
        grad_kl = np.tensordot(pi[s] * log_ratio, grad_logpi, axes=1)
        step = xi / beta * grad_logpi[a] - grad_kl / beta**2 + xi * grad_v
        W_next = project_ball(W + eta * step, net.W0, spec)

        cols["xi"][t] = xi
        cols["kl"][t] = kl
        cols["disp"][t] = np.linalg.norm(W - net.W0)
        cols["g_norm"][t] = np.linalg.norm(step)
        cols["v_mean"][t] = float(np.dot(mu_t.state_marginal(nA), v))
        if t % return_every == 0:
            cols["expected_return"][t] = expected_return(mdp, policy, mu_t)
        W_bar = (t + 1) / (t + 2) * W_bar + W_next / (t + 2)
        W = W_next
    q_out = q_values(net, X, W_bar).reshape(nS, nA)
    pi_out = boltzmann(q_out, beta)
    meta = {"eta": eta, "B": config.B, "m": net.m, "T": config.T, "mode": config.sampling,
            "beta": beta, "final_return": expected_return(mdp, Policy(pi_out))}
    return RunTrace(cols, W_bar, W, net, config, meta, pi_out=pi_out)


def expected_return(mdp: FiniteMdp, policy: Policy, mu: StationaryDist | None = None) -> float:
    """``J(pi)`` with the initial state drawn from the stationary law of ``pi``."""
    mu = mu or stationary_distribution(mdp, policy)
    q = q_pi_exact(mdp, policy)
    v = np.sum(policy.probs * q, axis=1)
    return float(np.dot(mu.state_marginal(mdp.n_actions), v))


# --------------------------------------------------------------------------
# multi-layer TD


def neural_td_deep(mdp: FiniteMdp, features: FeatureMap, policy: Policy, net: DeepParams,
                   config: TdConfig) -> RunTrace:
    """Projected TD for the multi-layer network; tracks the linearization error per iterate."""
    X = features.matrix
    n_pairs = len(X)
    mu = stationary_distribution(mdp, policy)
    eta = config.stepsize(mdp.gamma)
    spec = config.spec
    base = np.array([deep_forward(net, x, net.Ws0) for x in X])
    g0 = np.stack([deep_grad(net, x, net.Ws0) for x in X])
    n = config.T - 1
    cols = {k: np.full(n, np.nan) for k in ("t", "lin_gap", "lin_gap_max", "disp", "delta", "g_norm")}
    cols["t"] = np.arange(n)
    stream = None
    if config.sampling != "population":
        stream = _tuple_stream(mdp, policy, mu, config, n)
    nA = mdp.n_actions
    Ws = net.Ws0.copy()
    Ws_bar = Ws.copy()
    for t in range(n):
        D = Ws - net.Ws0
        q = np.array([deep_forward(net, x, Ws) for x in X])
        q_lin = base + np.tensordot(g0, D, axes=3)
        gap = q - q_lin
        cols["lin_gap"][t] = np.dot(mu.probs, gap * gap)
        cols["lin_gap_max"][t] = np.abs(gap).max()
        cols["disp"][t] = np.sqrt(np.sum(D * D))
        if stream is None:
            qt = q.reshape(mdp.n_states, nA)
            resid = (qt - bellman_eval(mdp, policy, qt)).ravel()
            grads = np.stack([deep_grad(net, x, Ws) for x in X])
            g = np.tensordot(mu.probs * resid, grads, axes=1)
            cols["delta"][t] = np.dot(mu.probs, resid)
        else:
            s, a, s2, a2 = stream[t]
            i, j = s * nA + a, s2 * nA + a2
            delta = q[i] - mdp.reward[s, a] - mdp.gamma * q[j]
            g = delta * deep_grad(net, X[i], Ws)
            cols["delta"][t] = delta
        cols["g_norm"][t] = np.sqrt(np.sum(g * g))
        Ws_next = project_layerwise(Ws - eta * g, net.Ws0, spec)
        Ws_bar = (t + 1) / (t + 2) * Ws_bar + Ws_next / (t + 2)
        Ws = Ws_next
    meta = {"eta": eta, "B": config.B, "m": net.m, "H": net.H, "T": config.T,
            "mode": config.sampling, "n_pairs": n_pairs}
    return RunTrace(cols, Ws_bar, Ws, net, config, meta)
