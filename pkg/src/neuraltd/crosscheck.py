"""Second, independently coded projection solvers used to re-verify fixed points.

The main projector works in pair space through an eigendecomposition and a
bisection on the ridge multiplier. The solvers here work on the primal weights
instead: one solves the ridge normal equations with a root finder on the
multiplier, the other runs accelerated projected gradient on the constrained
least-squares problem directly.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import brentq

from .env import FiniteMdp, Policy, StationaryDist, stationary_distribution
from .net import ProjectionSpec
from .oracle import FixedPoint, LinearizedFeatures, bellman_eval, bellman_opt, mu_norm_sq


def _design(feats: LinearizedFeatures, mu: np.ndarray):
    Phi = feats.matrix()
    return Phi, np.sqrt(mu)[:, None] * Phi


def project_primal(target: np.ndarray, feats: LinearizedFeatures, mu: np.ndarray,
                   spec: ProjectionSpec) -> np.ndarray:
    """Ball-constrained weighted fit via the primal normal equations; returns fitted values."""
    Phi, A = _design(feats, mu)
    base = Phi @ feats.W0.ravel()
    c = np.sqrt(mu) * (np.ravel(target) - base)
    u, *_ = np.linalg.lstsq(A, c, rcond=1e-13)
    if np.linalg.norm(u) > spec.B:
        G = A.T @ A
        rhs = A.T @ c
        eye = np.eye(len(rhs))

        def excess(lam):
            return np.linalg.norm(np.linalg.solve(G + lam * eye, rhs)) - spec.B

        # G is singular (rank <= number of pairs), so bracket away from zero
        scale = np.trace(G) / len(rhs)
        lo, hi = scale, scale
        while excess(lo) <= 0:
            lo *= 1e-2
        while excess(hi) > 0:
            hi *= 10.0
        lam = brentq(excess, lo, hi, xtol=1e-300, rtol=1e-15, maxiter=500)
        u = np.linalg.solve(G + lam * eye, rhs)
    return base + Phi @ u


def project_pgd(target: np.ndarray, feats: LinearizedFeatures, mu: np.ndarray,
                spec: ProjectionSpec, tol: float = 1e-13, max_iters: int = 200_000) -> np.ndarray:
    """Accelerated projected gradient (with adaptive restart) on the weighted fit."""
    Phi, A = _design(feats, mu)
    base = Phi @ feats.W0.ravel()
    c = np.sqrt(mu) * (np.ravel(target) - base)
    L = np.linalg.norm(A, 2) ** 2
    B = spec.B

    def proj(u):
        nrm = np.linalg.norm(u)
        return u if nrm <= B else u * (B / nrm)

    u = np.zeros(A.shape[1])
    y, t = u.copy(), 1.0
    for _ in range(max_iters):
        u_new = proj(y - A.T @ (A @ y - c) / L)
        if np.linalg.norm(A @ (u_new - u)) < tol:
            u = u_new
            break
        t_new = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
        if np.dot(u_new - u, y - u_new) > 0:  # momentum points uphill: restart
            y, t_new = u_new.copy(), 1.0
        else:
            y = u_new + (t - 1) / t_new * (u_new - u)
        u, t = u_new, t_new
    return base + Phi @ u


def reverify(fp: FixedPoint, mdp: FiniteMdp, policy: Policy, feats: LinearizedFeatures,
             spec: ProjectionSpec, mu: StationaryDist | None = None, beta: float | None = None,
             solver: str = "pgd") -> float:
    """``||Pi T Q - Q||_mu`` at the returned fixed point, with ``Pi`` from this module."""
    mu = mu or stationary_distribution(mdp, policy)
    q = fp.q_values
    if fp.kind == "evaluation":
        target = bellman_eval(mdp, policy, q)
    else:
        target = bellman_opt(mdp, q, beta)
    project = project_pgd if solver == "pgd" else project_primal
    values = project(target, feats, mu.probs, spec)
    return math.sqrt(mu_norm_sq(values, q, mu))
