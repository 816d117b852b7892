"""Finite MDPs, feature embeddings, policies, stationary laws and samplers.

State-action pairs are indexed ``i = s * n_actions + a`` everywhere; Q tables are
stored as ``(n_states, n_actions)`` arrays and flattened with ``ravel()``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .rng import make_rng

SCHEMA_VERSION = 1


class ChainNotMixing(RuntimeError):
    """Power iteration did not reach a stationary distribution."""


@dataclass(frozen=True)
class FiniteMdp:
    transition: np.ndarray  # P[s, a, s']
    reward: np.ndarray  # r[s, a]
    gamma: float
    r_bar: float = 1.0

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=float)
        r = np.asarray(self.reward, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or P.shape[:2] != r.shape:
            raise ValueError(f"inconsistent shapes {P.shape} / {r.shape}")
        if P.shape[0] == 0 or P.shape[1] == 0:
            raise ValueError("empty state or action set")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("transition rows must be probability vectors")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if np.max(np.abs(r)) > self.r_bar:
            raise ValueError("reward exceeds r_bar")
        P.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def n_pairs(self) -> int:
        return self.n_states * self.n_actions


@dataclass(frozen=True)
class FeatureMap:
    """Unit-norm embedding ``psi(s, a)``; ``table`` has shape (n_states, n_actions, d)."""

    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=float)
        if t.ndim != 3:
            raise ValueError("feature table must be (n_states, n_actions, d)")
        if t.shape[2] <= 2:
            raise ValueError("embedding dimension must exceed 2")
        norms = np.linalg.norm(t, axis=2)
        if np.max(np.abs(norms - 1.0)) > 1e-12:
            raise ValueError("features must have unit norm")
        flat = t.reshape(-1, t.shape[2])
        if len(flat) > 1:
            diff = flat[:, None, :] - flat[None, :, :]
            dist = np.linalg.norm(diff, axis=2) + np.eye(len(flat))
            if dist.min() <= 1e-9:
                raise ValueError("feature map is not injective")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @property
    def d(self) -> int:
        return self.table.shape[2]

    @property
    def matrix(self) -> np.ndarray:
        """Features stacked by pair index, shape (n_pairs, d)."""
        return self.table.reshape(-1, self.d)

    def __call__(self, s: int, a: int) -> np.ndarray:
        return self.table[s, a]


@dataclass(frozen=True)
class Policy:
    probs: np.ndarray  # pi(a | s), shape (n_states, n_actions)

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 2 or np.any(p < 0) or np.max(np.abs(p.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("policy rows must be probability vectors")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "Policy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @property
    def is_exploratory(self) -> bool:
        return bool(np.all(self.probs > 0))


@dataclass(frozen=True)
class StationaryDist:
    probs: np.ndarray  # over pair indices
    iterations: int = field(default=0, compare=False)

    def table(self, n_actions: int) -> np.ndarray:
        return self.probs.reshape(-1, n_actions)

    def state_marginal(self, n_actions: int) -> np.ndarray:
        return self.table(n_actions).sum(axis=1)


class Transition(NamedTuple):
    s: int
    a: int
    r: float
    s_next: int
    a_next: int | None = None


def pair_chain(mdp: FiniteMdp, policy: Policy) -> np.ndarray:
    """Transition matrix of the state-action chain, ``P[(s,a), (s',a')]``."""
    K = mdp.transition[:, :, :, None] * policy.probs[None, None, :, :]
    return K.reshape(mdp.n_pairs, mdp.n_pairs)


def state_chain(mdp: FiniteMdp, policy: Policy) -> np.ndarray:
    return np.einsum("sa,sat->st", policy.probs, mdp.transition)


def stationary_distribution(
    mdp: FiniteMdp, policy: Policy, tol: float = 1e-12, max_iters: int = 100_000
) -> StationaryDist:
    """Power iteration on the pair chain from the uniform law.

    Stops once successive iterates are within ``tol`` in total variation.
    """
    K = pair_chain(mdp, policy)
    mu = np.full(mdp.n_pairs, 1.0 / mdp.n_pairs)
    for it in range(1, max_iters + 1):
        nxt = mu @ K
        nxt /= nxt.sum()
        if 0.5 * np.abs(nxt - mu).sum() < tol:
            return StationaryDist(nxt, it)
        mu = nxt
    raise ChainNotMixing(f"chain not mixing: no convergence after {max_iters} iterations")


def _cdf(p: np.ndarray) -> np.ndarray:
    c = np.cumsum(p, axis=-1)
    c[..., -1] = 1.0
    return c


def _pick(cdf: np.ndarray, u: float) -> int:
    return int(np.searchsorted(cdf, u, side="right"))


def sample_iid(
    mdp: FiniteMdp, policy: Policy, mu: StationaryDist, rng: np.random.Generator
) -> Transition:
    """One tuple with ``(s, a) ~ mu``, ``s' ~ P(.|s,a)``, ``a' ~ pi(.|s')``.

    Consumes exactly three uniforms, so a block drawn with :func:`iid_stream`
    from an identically seeded generator yields the same tuples.
    """
    u = rng.random(3)
    i = min(_pick(_cdf(mu.probs), u[0]), mdp.n_pairs - 1)
    s, a = divmod(i, mdp.n_actions)
    s2 = _pick(_cdf(mdp.transition[s, a]), u[1])
    a2 = _pick(_cdf(policy.probs[s2]), u[2])
    return Transition(s, a, float(mdp.reward[s, a]), s2, a2)


def iid_stream(
    mdp: FiniteMdp, policy: Policy, mu: StationaryDist, rng: np.random.Generator, n: int
) -> np.ndarray:
    """Vectorized :func:`sample_iid`; returns an int array of rows (s, a, s', a')."""
    u = rng.random((n, 3))
    i = np.minimum(np.searchsorted(_cdf(mu.probs), u[:, 0], side="right"), mdp.n_pairs - 1)
    s, a = np.divmod(i, mdp.n_actions)
    # row-wise inverse CDF for s' and a'
    cP = _cdf(mdp.transition)[s, a]
    s2 = np.minimum((cP <= u[:, 1:2]).sum(axis=1), mdp.n_states - 1)
    cpi = _cdf(policy.probs)[s2]
    a2 = np.minimum((cpi <= u[:, 2:3]).sum(axis=1), mdp.n_actions - 1)
    return np.stack([s, a, s2, a2], axis=1)


def sample_markov(
    chain_state: tuple[int, int], mdp: FiniteMdp, policy: Policy, rng: np.random.Generator
) -> tuple[Transition, tuple[int, int]]:
    s, a = chain_state
    u = rng.random(2)
    s2 = _pick(_cdf(mdp.transition[s, a]), u[0])
    a2 = _pick(_cdf(policy.probs[s2]), u[1])
    return Transition(s, a, float(mdp.reward[s, a]), s2, a2), (s2, a2)


def markov_stream(
    start: tuple[int, int], mdp: FiniteMdp, policy: Policy, rng: np.random.Generator, n: int
) -> np.ndarray:
    """``n`` consecutive tuples of :func:`sample_markov` as rows (s, a, s', a')."""
    cP = _cdf(mdp.transition)
    cpi = _cdf(policy.probs)
    u = rng.random((n, 2))
    out = np.empty((n, 4), dtype=np.int64)
    s, a = start
    for k in range(n):
        s2 = int(np.searchsorted(cP[s, a], u[k, 0], side="right"))
        a2 = int(np.searchsorted(cpi[s2], u[k, 1], side="right"))
        out[k] = (s, a, s2, a2)
        s, a = s2, a2
    return out


@dataclass(frozen=True)
class MixingCurve:
    tv: np.ndarray  # sup_s d_TV(P_t(.|s), mu_S) for t = 0..horizon-1
    iota: float
    beta: float

    @property
    def mixing(self) -> bool:
        return self.beta < 1.0


def estimate_mixing(mdp: FiniteMdp, policy: Policy, horizon: int) -> MixingCurve:
    """Exact worst-case TV distance to stationarity and a log-linear fit ``iota * beta**t``."""
    if horizon < 2:
        raise ValueError("horizon must be at least 2")
    Ps = state_chain(mdp, policy)
    mu_s = stationary_distribution(mdp, policy).state_marginal(mdp.n_actions)
    dist = np.eye(mdp.n_states)
    tv = np.empty(horizon)
    for t in range(horizon):
        tv[t] = 0.5 * np.abs(dist - mu_s).sum(axis=1).max()
        dist = dist @ Ps
    keep = tv > 1e-13
    if keep.sum() < 2:
        return MixingCurve(tv, float(tv[0]), 0.0)
    t = np.arange(horizon)[keep]
    slope, intercept = np.polyfit(t, np.log(tv[keep]), 1)
    return MixingCurve(tv, float(np.exp(intercept)), float(np.exp(slope)))


def build_random_mdp(
    n_states: int,
    n_actions: int,
    d: int,
    branching: int,
    seed: int,
    gamma: float = 0.9,
) -> tuple[FiniteMdp, FeatureMap]:
    """Garnet-style generator with uniform rewards in [-1, 1] and random unit features."""
    if n_states * n_actions == 0:
        raise ValueError("need at least one state and one action")
    if branching < 1 or branching > n_states:
        raise ValueError("branching must lie in [1, n_states]")
    if d < 3:
        raise ValueError("embedding dimension must exceed 2")
    rng = make_rng(seed, "mdp")
    P = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            succ = rng.choice(n_states, size=branching, replace=False)
            P[s, a, succ] = rng.dirichlet(np.ones(branching))
    P /= P.sum(axis=2, keepdims=True)
    r = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    f = make_rng(seed, "features").standard_normal((n_states, n_actions, d))
    f /= np.linalg.norm(f, axis=2, keepdims=True)
    return FiniteMdp(P, r, gamma, 1.0), FeatureMap(f)


def mdp_to_json(mdp: FiniteMdp, features: FeatureMap) -> dict:
    return {
        "version": SCHEMA_VERSION,
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "gamma": mdp.gamma,
        "r_bar": mdp.r_bar,
        "transition": mdp.transition.tolist(),
        "reward": mdp.reward.tolist(),
        "features": features.table.tolist(),
    }


def mdp_from_json(doc: dict) -> tuple[FiniteMdp, FeatureMap]:
    if doc.get("version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported env schema version {doc.get('version')!r}")
    mdp = FiniteMdp(
        np.array(doc["transition"]), np.array(doc["reward"]), float(doc["gamma"]),
        float(doc.get("r_bar", 1.0)),
    )
    if (mdp.n_states, mdp.n_actions) != (doc["n_states"], doc["n_actions"]):
        raise ValueError("declared sizes disagree with arrays")
    return mdp, FeatureMap(np.array(doc["features"]))


def save_env(path: str | Path, mdp: FiniteMdp, features: FeatureMap) -> None:
    Path(path).write_text(json.dumps(mdp_to_json(mdp, features)))


GENERATOR_DEFAULTS = dict(n_states=5, n_actions=2, d=8, branching=3, seed=0, gamma=0.9)


def parse_generator_spec(text: str) -> dict:
    """Parse ``random:n_states=5,n_actions=2,...`` into generator kwargs."""
    _, _, body = text.partition(":")
    params = dict(GENERATOR_DEFAULTS)
    for item in filter(None, body.split(",")):
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in params:
            raise ValueError(f"unknown generator key {key!r}")
        params[key] = float(value) if key == "gamma" else int(value)
    return params


def load_env(spec: str | dict) -> tuple[FiniteMdp, FeatureMap]:
    """Resolve ``--env``: a JSON file path, a ``random:`` spec string, or a kwargs dict."""
    if isinstance(spec, dict):
        if "file" in spec:
            return load_env(spec["file"])
        params = dict(GENERATOR_DEFAULTS)
        unknown = set(spec) - set(params)
        if unknown:
            raise ValueError(f"unknown env keys {sorted(unknown)}")
        params.update(spec)
        return build_random_mdp(**params)
    if spec.startswith("random"):
        return build_random_mdp(**parse_generator_spec(spec))
    return mdp_from_json(json.loads(Path(spec).read_text()))
