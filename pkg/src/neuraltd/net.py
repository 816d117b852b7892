"""Two-layer and multi-layer ReLU Q-networks, their local linearizations and ball projections.

Two-layer network::

    Q(x; W) = m**-0.5 * sum_r b_r * relu(W_r . x)

with frozen signs ``b`` and a frozen copy ``W0`` of the initialization. The ReLU
subgradient at zero is taken to be zero (strict indicator ``W_r . x > 0``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import make_rng

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ProjectionSpec:
    B: float

    def __post_init__(self):
        if not self.B > 0:
            raise ValueError(f"ball radius must be positive, got {self.B}")


@dataclass
class TwoLayerParams:
    b: np.ndarray  # (m,) frozen signs
    W: np.ndarray  # (m, d) trainable
    W0: np.ndarray  # (m, d) frozen initialization

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)
        self.W0 = np.asarray(self.W0, dtype=float)
        self.W = np.array(self.W, dtype=float)
        if not np.all(np.isin(self.b, (-1.0, 1.0))):
            raise ValueError("output signs must be +-1")
        if self.W.shape != self.W0.shape or self.W.shape[0] != self.b.shape[0]:
            raise ValueError("shape mismatch between b, W and W0")
        self.b.setflags(write=False)
        self.W0.setflags(write=False)

    @property
    def m(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    def with_weights(self, W: np.ndarray) -> "TwoLayerParams":
        return TwoLayerParams(self.b, W, self.W0)


def init_two_layer(m: int, d: int, seed: int) -> TwoLayerParams:
    """``b_r ~ Unif{-1, 1}``, ``W_r(0) ~ N(0, I_d / d)``, ``W = W0``.

    Neurons are drawn row by row from separate streams, so the first ``k``
    neurons of a width-``m`` network equal the width-``k`` network with the same
    seed (nested initializations).
    """
    if m < 1 or d < 1:
        raise ValueError("m and d must be positive")
    signs = make_rng(seed, "init", "b").random(m) < 0.5
    b = np.where(signs, 1.0, -1.0)
    W0 = make_rng(seed, "init", "W").standard_normal((m, d)) / np.sqrt(d)
    return TwoLayerParams(b, W0.copy(), W0)


def _check_x(p, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != p.d:
        raise ValueError(f"input dimension {x.shape[-1]} != {p.d}")
    return x


def q_forward(p: TwoLayerParams, x: np.ndarray, W: np.ndarray | None = None) -> float:
    x = _check_x(p, x)
    W = p.W if W is None else W
    z = W @ x
    return float(p.b @ np.maximum(z, 0.0) / np.sqrt(p.m))


def q_values(p: TwoLayerParams, X: np.ndarray, W: np.ndarray | None = None) -> np.ndarray:
    """Network output at every row of ``X``."""
    X = _check_x(p, X)
    W = p.W if W is None else W
    return np.maximum(X @ W.T, 0.0) @ p.b / np.sqrt(p.m)


def q_grad(p: TwoLayerParams, x: np.ndarray, W: np.ndarray | None = None) -> np.ndarray:
    """Row ``r`` is ``b_r * 1{W_r . x > 0} * x / sqrt(m)``."""
    x = _check_x(p, x)
    W = p.W if W is None else W
    coef = p.b * (W @ x > 0) / np.sqrt(p.m)
    return np.outer(coef, x)


def q0_forward(p: TwoLayerParams, W_eval: np.ndarray, x: np.ndarray) -> float:
    """Linearization at ``W0``: activation pattern from ``W0``, weights from ``W_eval``."""
    x = _check_x(p, x)
    if W_eval.shape != p.W0.shape:
        raise ValueError("W_eval shape mismatch")
    active = p.W0 @ x > 0
    return float((p.b * active) @ (W_eval @ x) / np.sqrt(p.m))


def q0_values(p: TwoLayerParams, X: np.ndarray, W_eval: np.ndarray) -> np.ndarray:
    X = _check_x(p, X)
    active = X @ p.W0.T > 0
    return (active * (X @ W_eval.T)) @ p.b / np.sqrt(p.m)


def project_ball(W: np.ndarray, W0: np.ndarray, spec: ProjectionSpec) -> np.ndarray:
    """Euclidean projection of ``W`` onto ``{W : ||W - W0||_2 <= B}``."""
    D = W - W0
    norm = np.linalg.norm(D)
    if norm <= spec.B:
        return W
    return W0 + (spec.B / norm) * D


def flip_fraction(p: TwoLayerParams, W_now: np.ndarray, x: np.ndarray) -> float:
    """Share of neurons with ``|W_r(0) . x| <= ||W_r - W_r(0)||``."""
    x = _check_x(p, x)
    radius = np.linalg.norm(W_now - p.W0, axis=1)
    return float(np.mean(np.abs(p.W0 @ x) <= radius))


def flip_fractions(p: TwoLayerParams, X: np.ndarray, W_now: np.ndarray) -> np.ndarray:
    radius = np.linalg.norm(W_now - p.W0, axis=1)
    return np.mean(np.abs(X @ p.W0.T) <= radius, axis=1)


def save_checkpoint(path: str | Path, p: TwoLayerParams) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "shape": [p.m, p.d],
        "b": p.b.tolist(),
        "W": p.W.tolist(),
        "W0": p.W0.tolist(),
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> TwoLayerParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    p = TwoLayerParams(np.array(doc["b"]), np.array(doc["W"]), np.array(doc["W0"]))
    if [p.m, p.d] != list(doc["shape"]):
        raise ValueError("checkpoint shape disagrees with arrays")
    return p


# --------------------------------------------------------------------------
# multi-layer network


@dataclass
class DeepParams:
    """``x0 = A x / sqrt(m)``, ``x_h = relu(W_h x_{h-1}) / sqrt(m)``, ``y = b . x_H``.

    Entries of ``A`` and ``W_h`` start as N(0, 2), ``b`` as N(0, 1). Only ``Ws``
    (shape ``(H, m, m)``) is trained.
    """

    A: np.ndarray
    Ws: np.ndarray
    b: np.ndarray
    Ws0: np.ndarray

    def __post_init__(self):
        self.Ws = np.array(self.Ws, dtype=float)
        if self.Ws.ndim != 3 or self.Ws.shape[0] < 1:
            raise ValueError("need H >= 1 hidden weight matrices")
        if self.Ws.shape != self.Ws0.shape:
            raise ValueError("Ws / Ws0 shape mismatch")
        for arr in (self.A, self.b, self.Ws0):
            arr.setflags(write=False)

    @property
    def H(self) -> int:
        return self.Ws.shape[0]

    @property
    def m(self) -> int:
        return self.Ws.shape[1]

    @property
    def d(self) -> int:
        return self.A.shape[1]


def init_deep(H: int, m: int, d: int, seed: int) -> DeepParams:
    if H < 1:
        raise ValueError("H must be at least 1")
    rng = make_rng(seed, "init", "deep")
    A = rng.normal(0.0, np.sqrt(2.0), size=(m, d))
    Ws0 = rng.normal(0.0, np.sqrt(2.0), size=(H, m, m))
    b = rng.standard_normal(m)
    return DeepParams(A, Ws0.copy(), b, Ws0)


def _deep_layers(p: DeepParams, x: np.ndarray, Ws: np.ndarray):
    x = np.asarray(x, dtype=float)
    if x.shape != (p.d,):
        raise ValueError(f"input dimension {x.shape} != ({p.d},)")
    if Ws.shape != p.Ws0.shape:
        raise ValueError("Ws shape mismatch")
    scale = 1.0 / np.sqrt(p.m)
    hs = [scale * (p.A @ x)]
    pre = []
    for h in range(p.H):
        z = Ws[h] @ hs[-1]
        pre.append(z)
        hs.append(scale * np.maximum(z, 0.0))
    return hs, pre


def deep_forward(p: DeepParams, x: np.ndarray, Ws: np.ndarray | None = None) -> float:
    hs, _ = _deep_layers(p, x, p.Ws if Ws is None else Ws)
    return float(p.b @ hs[-1])


def deep_grad(p: DeepParams, x: np.ndarray, Ws: np.ndarray | None = None) -> np.ndarray:
    """Reverse-mode gradient of the output with respect to every ``W_h``."""
    Ws = p.Ws if Ws is None else Ws
    hs, pre = _deep_layers(p, x, Ws)
    scale = 1.0 / np.sqrt(p.m)
    grad = np.empty_like(Ws)
    upstream = p.b  # d y / d x_h
    for h in reversed(range(p.H)):
        dz = upstream * scale * (pre[h] > 0)
        grad[h] = np.outer(dz, hs[h])
        upstream = Ws[h].T @ dz
    return grad


def deep_q0(p: DeepParams, Ws_eval: np.ndarray, x: np.ndarray) -> float:
    """First-order expansion of the network around ``Ws0``."""
    base = deep_forward(p, x, p.Ws0)
    g0 = deep_grad(p, x, p.Ws0)
    return float(base + np.sum(g0 * (Ws_eval - p.Ws0)))


def project_layerwise(Ws: np.ndarray, Ws0: np.ndarray, spec: ProjectionSpec) -> np.ndarray:
    out = np.array(Ws, dtype=float)
    for h in range(out.shape[0]):
        out[h] = project_ball(out[h], Ws0[h], spec)
    return out
