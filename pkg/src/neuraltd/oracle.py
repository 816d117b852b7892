"""Ground truth for the learning loops.

Linearized (NTK) features, exact Bellman operators, the ball-constrained
projection onto the linearized class and the projected fixed-point solvers that
give ``W*``; plus exact error functionals, the arc-cosine kernel and the
empirical check of the exploration regularity constant ``nu``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .env import FeatureMap, FiniteMdp, Policy, StationaryDist, pair_chain, stationary_distribution
from .net import ProjectionSpec, TwoLayerParams
from .rng import make_rng


class SolverError(RuntimeError):
    def __init__(self, message: str, residual: float = math.nan, iterations: int = 0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class LinearizedFeatures:
    """``Phi(x)`` with block ``r`` equal to ``b_r 1{W_r(0).x > 0} x / sqrt(m)``.

    Stored implicitly through the input table ``X`` and the activation mask at
    initialization, so ``Phi(x) . W`` equals ``q0_forward(net, W, x)``.
    """

    X: np.ndarray  # (n_pairs, d)
    mask: np.ndarray  # (n_pairs, m) activation pattern at W0
    b: np.ndarray
    W0: np.ndarray

    @property
    def m(self) -> int:
        return self.W0.shape[0]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def matrix(self) -> np.ndarray:
        """Dense ``(n_pairs, m*d)`` feature matrix."""
        coef = self.mask * self.b / np.sqrt(self.m)
        return (coef[:, :, None] * self.X[:, None, :]).reshape(self.n, -1)

    def apply(self, W: np.ndarray) -> np.ndarray:
        """``Phi(x) . W`` for every pair."""
        return (self.mask * (self.X @ W.T)) @ self.b / np.sqrt(self.m)

    def adjoint(self, coef: np.ndarray) -> np.ndarray:
        """``sum_x coef_x Phi(x)`` reshaped to ``(m, d)``."""
        return (self.b / np.sqrt(self.m))[:, None] * ((self.mask.T * coef) @ self.X)

    def gram(self) -> np.ndarray:
        """``Phi Phi^T`` without forming ``Phi``."""
        M = self.mask.astype(float)
        return (self.X @ self.X.T) * (M @ M.T) / self.m

    @property
    def base(self) -> np.ndarray:
        """Values at initialization, ``Q(x; W0)``."""
        return self.apply(self.W0)


def ntk_features(net: TwoLayerParams, features: FeatureMap) -> LinearizedFeatures:
    X = features.matrix
    if X.shape[1] != net.d:
        raise ValueError("feature dimension does not match the network")
    return LinearizedFeatures(X, X @ net.W0.T > 0, net.b, net.W0)


# --------------------------------------------------------------------------
# Bellman operators on (n_states, n_actions) tables


def next_value_eval(policy: Policy, q: np.ndarray) -> np.ndarray:
    return np.sum(policy.probs * q, axis=1)


def softmax_value(q: np.ndarray, beta: float) -> np.ndarray:
    """``beta^-1 log sum_a exp(beta q(s, a))`` with a max shift."""
    return logsumexp(beta * q, axis=-1) / beta


def bellman_eval(mdp: FiniteMdp, policy: Policy, q: np.ndarray) -> np.ndarray:
    return mdp.reward + mdp.gamma * mdp.transition @ next_value_eval(policy, q)


def bellman_opt(mdp: FiniteMdp, q: np.ndarray, beta: float | None = None) -> np.ndarray:
    v = q.max(axis=1) if beta is None else softmax_value(q, beta)
    return mdp.reward + mdp.gamma * mdp.transition @ v


def q_pi_exact(mdp: FiniteMdp, policy: Policy) -> np.ndarray:
    K = pair_chain(mdp, policy)
    q = np.linalg.solve(np.eye(mdp.n_pairs) - mdp.gamma * K, mdp.reward.ravel())
    return q.reshape(mdp.n_states, mdp.n_actions)


def mu_norm_sq(qa: np.ndarray, qb: np.ndarray, mu: StationaryDist | np.ndarray) -> float:
    w = mu.probs if isinstance(mu, StationaryDist) else mu
    diff = np.ravel(qa) - np.ravel(qb)
    return float(np.dot(w, diff * diff))


def msbe(mdp: FiniteMdp, policy: Policy, q: np.ndarray, mu: StationaryDist | None = None) -> float:
    mu = mu or stationary_distribution(mdp, policy)
    return mu_norm_sq(q, bellman_eval(mdp, policy, q), mu)


# --------------------------------------------------------------------------
# projection onto the linearized ball class


@dataclass
class Projection:
    coef: np.ndarray  # W - W0 = Phi^T coef
    values: np.ndarray  # Phi(x) . W at every pair
    lam: float  # ridge multiplier, 0 when the ball is inactive
    norm: float  # ||W - W0||


class BallProjector:
    """``mu``-weighted least squares over ``{Phi . W : ||W - W0|| <= B}``.

    Works in the pair space: with ``A = D^1/2 Phi`` and the eigendecomposition of
    ``A A^T`` the ridge path ``u(lam) = A^T (A A^T + lam I)^-1 c`` and its norm
    are closed-form, and the multiplier is located by bisection. Without an
    active constraint the minimum-norm solution is returned.
    """

    def __init__(self, feats: LinearizedFeatures, mu: np.ndarray, spec: ProjectionSpec,
                 constraint_tol: float = 1e-10):
        self.feats = feats
        self.spec = spec
        self.mu = np.asarray(mu, dtype=float)
        self.constraint_tol = constraint_tol
        self.K = feats.gram()
        self.base = feats.base
        self.sqrt_mu = np.sqrt(self.mu)
        G = self.sqrt_mu[:, None] * self.K * self.sqrt_mu[None, :]
        lam, V = np.linalg.eigh(G)
        cutoff = max(lam.max(), 0.0) * 1e-13
        self.evals = np.where(lam > cutoff, lam, 0.0)
        self.evecs = V

    def _path(self, ct: np.ndarray, lam: float) -> np.ndarray:
        ev = self.evals
        if lam == 0.0:
            return np.divide(ct, ev, out=np.zeros_like(ct), where=ev > 0)
        return ct / (ev + lam)

    def _norm(self, ct: np.ndarray, lam: float) -> float:
        w = self._path(ct, lam)
        return float(np.sqrt(np.sum(self.evals * w * w)))

    def project(self, target: np.ndarray) -> Projection:
        y = np.ravel(target) - self.base
        ct = self.evecs.T @ (self.sqrt_mu * y)
        B = self.spec.B
        lam = 0.0
        norm = self._norm(ct, 0.0)
        if norm > B:
            lo, hi = 0.0, float(np.sqrt(np.sum(self.evals * ct * ct)) / B) + 1e-300
            while self._norm(ct, hi) > B:
                hi *= 2.0
            for _ in range(400):
                mid = 0.5 * (lo + hi)
                if self._norm(ct, mid) > B:
                    lo = mid
                else:
                    hi = mid
                if B - self._norm(ct, hi) <= self.constraint_tol or hi - lo <= 1e-16 * hi:
                    break
            lam = hi
            norm = self._norm(ct, lam)
        coef = self.sqrt_mu * (self.evecs @ self._path(ct, lam))
        return Projection(coef, self.base + self.K @ coef, lam, norm)

    def weights(self, proj: Projection) -> np.ndarray:
        return self.feats.W0 + self.feats.adjoint(proj.coef)


# --------------------------------------------------------------------------
# projected fixed points


@dataclass
class FixedPoint:
    W_star: np.ndarray
    q_values: np.ndarray  # (n_states, n_actions)
    residual: float
    kind: str
    iterations: int
    lam: float
    steps: np.ndarray = field(repr=False)  # ||Q_{k+1} - Q_k||_mu per iteration
    active: np.ndarray = field(repr=False)  # ball constraint active per iteration

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "W_star": self.W_star.tolist(),
            "q_values": self.q_values.tolist(),
            "residual": self.residual,
            "iterations": self.iterations,
            "lam": self.lam,
        }


def _solve_fixed_point(operator, projector: BallProjector, shape, kind: str, tol: float,
                       max_iters: int, patience: int | None) -> FixedPoint:
    mu = projector.mu
    q = projector.base.copy()  # warm start at W(0)
    proj = None
    steps, active = [], []
    best, stall = math.inf, 0
    for k in range(1, max_iters + 1):
        proj = projector.project(operator(q.reshape(shape)))
        step = math.sqrt(mu_norm_sq(proj.values, q, mu))
        steps.append(step)
        active.append(proj.lam > 0)
        q = proj.values
        if step < tol:
            after = projector.project(operator(q.reshape(shape)))
            residual = math.sqrt(mu_norm_sq(after.values, q, mu))
            return FixedPoint(projector.weights(proj), q.reshape(shape), residual, kind, k,
                              proj.lam, np.array(steps), np.array(active))
        if patience is not None:
            if step < best:
                best, stall = step, 0
            else:
                stall += 1
                if stall >= patience:
                    raise SolverError(f"{kind} iteration diverging or oscillating", step, k)
    raise SolverError(f"{kind} iteration did not converge", steps[-1], max_iters)


def solve_projected_evaluation(
    mdp: FiniteMdp,
    policy: Policy,
    feats: LinearizedFeatures,
    spec: ProjectionSpec,
    tol: float = 1e-10,
    mu: StationaryDist | None = None,
    max_iters: int = 100_000,
) -> FixedPoint:
    """Fixed point of ``Q = Pi T^pi Q`` by contraction iteration from ``Q(.; W0)``."""
    mu = mu or stationary_distribution(mdp, policy)
    projector = BallProjector(feats, mu.probs, spec)
    shape = (mdp.n_states, mdp.n_actions)
    return _solve_fixed_point(lambda q: bellman_eval(mdp, policy, q), projector, shape,
                              "evaluation", tol, max_iters, None)


def solve_projected_optimality(
    mdp: FiniteMdp,
    pi_exp: Policy,
    feats: LinearizedFeatures,
    spec: ProjectionSpec,
    tol: float = 1e-10,
    beta: float | None = None,
    mu: StationaryDist | None = None,
    max_iters: int = 100_000,
    patience: int = 500,
) -> FixedPoint:
    """Fixed point of ``Q = Pi T Q`` (hard max) or ``Q = Pi T_beta Q`` (softmax)."""
    if beta is not None and beta <= 0:
        raise ValueError("beta must be positive")
    mu = mu or stationary_distribution(mdp, pi_exp)
    projector = BallProjector(feats, mu.probs, spec)
    shape = (mdp.n_states, mdp.n_actions)
    kind = "optimality" if beta is None else "soft-optimality"
    return _solve_fixed_point(lambda q: bellman_opt(mdp, q, beta), projector, shape, kind,
                              tol, max_iters, patience)


def project_table(q: np.ndarray, feats: LinearizedFeatures, mu: StationaryDist,
                  spec: ProjectionSpec) -> np.ndarray:
    """``Pi_F q`` as a table."""
    return BallProjector(feats, mu.probs, spec).project(q).values.reshape(np.shape(q))


def mspbe(mdp: FiniteMdp, policy: Policy, q: np.ndarray, feats: LinearizedFeatures,
          spec: ProjectionSpec, mu: StationaryDist | None = None) -> float:
    mu = mu or stationary_distribution(mdp, policy)
    target = project_table(bellman_eval(mdp, policy, q), feats, mu, spec)
    return mu_norm_sq(q, target, mu)


def linearized_semigradient(fp_or_W: np.ndarray, mdp: FiniteMdp, policy: Policy,
                            feats: LinearizedFeatures, mu: StationaryDist) -> np.ndarray:
    """``E_mu[delta_0(x, r, x'; W) Phi(x)]`` for the evaluation operator."""
    q0 = feats.apply(fp_or_W).reshape(mdp.n_states, mdp.n_actions)
    resid = q0 - bellman_eval(mdp, policy, q0)
    return feats.adjoint(mu.probs * resid.ravel())


# --------------------------------------------------------------------------
# arc-cosine kernel


def _unit_pair(x, y):
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if abs(np.linalg.norm(x) - 1) > 1e-9 or abs(np.linalg.norm(y) - 1) > 1e-9:
        raise ValueError("kernel inputs must be unit vectors")
    return x, y


def kernel_closed_form(x: np.ndarray, y: np.ndarray) -> float:
    """``E_w[1{w.x > 0, w.y > 0}] x.y`` for Gaussian ``w``."""
    x, y = _unit_pair(x, y)
    c = float(np.clip(x @ y, -1.0, 1.0))
    return c * (math.pi - math.acos(c)) / (2 * math.pi)


def kernel_mc(x: np.ndarray, y: np.ndarray, n: int, seed: int) -> tuple[float, float]:
    """Monte Carlo estimate with ``w ~ N(0, I_d / d)`` and its standard error."""
    x, y = _unit_pair(x, y)
    w = make_rng(seed, "kernel").standard_normal((n, x.size)) / math.sqrt(x.size)
    hits = ((w @ x > 0) & (w @ y > 0)).astype(float)
    c = float(x @ y)
    p = hits.mean()
    return c * p, abs(c) * math.sqrt(p * (1 - p) / n)


def function_ball_check(net: TwoLayerParams, W: np.ndarray, spec: ProjectionSpec) -> tuple[bool, float]:
    margin = spec.B - float(np.linalg.norm(W - net.W0))
    return margin >= 0, margin


# --------------------------------------------------------------------------
# exploration regularity


@dataclass
class AssumptionReport:
    nu_hat: float
    n_pairs: int
    n_degenerate: int
    min_ratio: float
    witness: int  # index of the minimizing pair


def nu_ratios(q1: np.ndarray, q2: np.ndarray, mu: StationaryDist, n_actions: int,
              beta: float | None = None) -> np.ndarray:
    """Per-pair ratio of the pair-space to the greedy-value ``mu`` norms.

    ``q1``, ``q2`` are stacks of tables ``(k, n_states, n_actions)``; degenerate
    pairs come back as NaN.
    """
    w = mu.probs.reshape(-1, n_actions)
    num = np.einsum("sa,ksa->k", w, (q1 - q2) ** 2)
    if beta is None:
        g = q1.max(axis=2) - q2.max(axis=2)
    else:
        g = softmax_value(q1, beta) - softmax_value(q2, beta)
    den = g**2 @ w.sum(axis=1)
    out = np.full(len(num), np.nan)
    ok = den >= 1e-24
    out[ok] = np.sqrt(num[ok]) / np.sqrt(den[ok])
    return out


def random_ball_point(feats: LinearizedFeatures, spec: ProjectionSpec,
                      rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from the ball around ``W0``."""
    g = rng.standard_normal(feats.W0.shape)
    radius = spec.B * rng.random() ** (1.0 / g.size)
    return feats.W0 + (radius / np.linalg.norm(g)) * g


def estimate_nu(mdp: FiniteMdp, pi_exp: Policy, feats: LinearizedFeatures, spec: ProjectionSpec,
                n_pairs: int, seed: int, beta: float | None = None,
                mu: StationaryDist | None = None) -> AssumptionReport:
    mu = mu or stationary_distribution(mdp, pi_exp)
    rng = make_rng(seed, "nu")
    shape = (mdp.n_states, mdp.n_actions)
    q1 = np.empty((n_pairs,) + shape)
    q2 = np.empty((n_pairs,) + shape)
    for k in range(n_pairs):
        q1[k] = feats.apply(random_ball_point(feats, spec, rng)).reshape(shape)
        q2[k] = feats.apply(random_ball_point(feats, spec, rng)).reshape(shape)
    ratios = nu_ratios(q1, q2, mu, mdp.n_actions, beta)
    ok = ~np.isnan(ratios)
    if not ok.any():
        raise SolverError("all sampled pairs are degenerate")
    witness = int(np.nanargmin(ratios))
    min_ratio = float(ratios[witness])
    return AssumptionReport(min_ratio - mdp.gamma, n_pairs, int((~ok).sum()), min_ratio, witness)
