"""Residual graph convolution over unit graphs.

Test time, layer ``k`` computes ``relu(A X W_k)`` and the module returns
``X_K + X_0``.  Training replaces ``A X`` by a neighborhood-sampled
estimate plus a self term::

    x_i <- ( (1/N_s) sum_s A[i, j_s] x_{j_s} + x_i ) W_k

Its expectation over uniform draws is the neighborhood *mean* of
``A[i, j] x_j`` (plus ``x_i``), not the full sum used at test time; the
two aggregations are kept as they are and the mismatch is exercised by
the tests rather than normalized away.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from gcmtal.graphbuild import SparseAdjacency
from gcmtal.numkernel import (
    ParamTensor,
    ShapeError,
    relu,
    sparse_dense_matmul,
    sparse_dense_matmul_backward,
    sparse_dense_matmul_data_grad,
)

MODES = ("gcn", "mlp", "meanpool")


@dataclass(frozen=True)
class GcmConfig:
    depth: int = 2
    hidden_dims: Optional[tuple] = None
    dropout: float = 0.8  # drop probability
    sampling_size: int = 4
    mode: str = "gcn"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.sampling_size < 1:
            raise ValueError("sampling_size must be >= 1")
        if self.hidden_dims is not None:
            object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    def layer_dims(self, d: int) -> list[int]:
        dims = [d] * self.depth if self.hidden_dims is None else list(self.hidden_dims)
        if len(dims) != self.depth:
            raise ShapeError(f"{len(dims)} hidden dims given for depth {self.depth}")
        if dims[-1] != d:
            raise ShapeError(f"last layer width {dims[-1]} must equal input width {d}")
        return [d] + dims


class GcmWeights:
    def __init__(self, layers: Sequence[ParamTensor]):
        self.layers = list(layers)

    @classmethod
    def init(cls, cfg: GcmConfig, d: int, rng: np.random.Generator,
             scale: float = 1.0, name: str = "gcm") -> "GcmWeights":
        dims = cfg.layer_dims(d)
        layers = []
        for k in range(cfg.depth):
            std = scale / np.sqrt(dims[k])
            layers.append(ParamTensor(rng.normal(0.0, std, (dims[k], dims[k + 1])),
                                      f"{name}.W{k + 1}"))
        return cls(layers)

    @classmethod
    def zeros(cls, cfg: GcmConfig, d: int) -> "GcmWeights":
        dims = cfg.layer_dims(d)
        return cls([ParamTensor(np.zeros((dims[k], dims[k + 1])), f"gcm.W{k + 1}")
                    for k in range(cfg.depth)])

    def check(self, cfg: GcmConfig, d: int):
        dims = cfg.layer_dims(d)
        shapes = [w.shape for w in self.layers]
        want = [(dims[k], dims[k + 1]) for k in range(cfg.depth)]
        if shapes != want:
            raise ShapeError(f"weight shapes {shapes} do not match config {want}")


# ---------------------------------------------------------------------------
# propagation operators


@dataclass
class Propagation:
    """One layer's aggregation ``Z = A' X + self_weight * X``.

    ``adjacency`` is ``coef * A`` on ``A``'s pattern, ``coef`` aligned with
    ``A.data`` (kept for gradients into learned edge weights).  ``None``
    means no neighbor term at all (the MLP ablation).
    """

    adjacency: Optional[SparseAdjacency]
    coef: Optional[np.ndarray] = None
    self_weight: float = 0.0

    def apply(self, X):
        if self.adjacency is None:
            return X if self.self_weight == 1.0 else self.self_weight * X
        Z = sparse_dense_matmul(self.adjacency, X)
        if self.self_weight:
            Z = Z + self.self_weight * X
        return Z

    def backward(self, dZ):
        if self.adjacency is None:
            return dZ if self.self_weight == 1.0 else self.self_weight * dZ
        dX = sparse_dense_matmul_backward(self.adjacency, dZ)
        if self.self_weight:
            dX = dX + self.self_weight * dZ
        return dX


def full_propagation(A: SparseAdjacency) -> Propagation:
    return Propagation(A, np.ones(A.nnz), 0.0)


def sample_propagation(A: SparseAdjacency, n_s: int, rng: np.random.Generator) -> Propagation:
    """Draw ``n_s`` neighbors per node uniformly with replacement.

    Nodes without neighbors keep only the self term.
    """
    n = A.shape[0]
    deg = np.diff(A.indptr)
    draws = np.floor(rng.random((n, n_s)) * deg[:, None]).astype(np.int64)
    has = deg > 0
    pos = (A.indptr[:-1, None] + draws)[has].ravel()
    coef = np.bincount(pos, minlength=A.nnz) / float(n_s)
    return Propagation(A.with_data(A.data * coef), coef, 1.0)


def enumerated_propagation(A: SparseAdjacency) -> Propagation:
    """Expectation of :func:`sample_propagation`: each neighbor weighted ``1/deg``."""
    deg = np.diff(A.indptr)
    coef = 1.0 / np.repeat(np.maximum(deg, 1), deg)
    return Propagation(A.with_data(A.data * coef), coef, 1.0)


def mean_pool_operator(A: SparseAdjacency) -> SparseAdjacency:
    """Row-normalized ``pattern(A) | I``: averages each node over itself and its neighbors."""
    n = A.shape[0]
    pattern = A.to_scipy().copy()
    pattern.data = np.ones_like(pattern.data)
    import scipy.sparse as sp

    pool = ((pattern + sp.identity(n, format="csr")) > 0).astype(np.float64).tocsr()
    pool.sort_indices()
    rows = np.asarray(pool.sum(axis=1)).ravel()
    pool = sp.diags(1.0 / rows) @ pool
    pool = pool.tocsr()
    pool.sort_indices()
    return SparseAdjacency(pool.indptr.astype(np.int64), pool.indices.astype(np.int64),
                           pool.data, (n, n))


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class GcmCache:
    X0: np.ndarray
    props: list
    inputs: list = field(default_factory=list)
    aggregates: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    pool: Optional[SparseAdjacency] = None
    pool_input: Optional[np.ndarray] = None


def _check_inputs(X0, A, w, cfg):
    if X0.ndim != 2:
        raise ShapeError(f"features must be 2-D, got shape {X0.shape}")
    w.check(cfg, X0.shape[1])
    if A is not None and A.shape != (X0.shape[0], X0.shape[0]):
        raise ShapeError(f"adjacency {A.shape} does not match {X0.shape[0]} nodes")


def run_layers(X0: np.ndarray, props: Sequence[Propagation], w: GcmWeights, cfg: GcmConfig,
               dropout_rng: Optional[np.random.Generator] = None,
               pool: Optional[SparseAdjacency] = None):
    """Shared forward; returns ``(Y, cache)``."""
    cache = GcmCache(X0, list(props), pool=pool)
    H = X0
    for k, prop in enumerate(props):
        cache.inputs.append(H)
        Z = prop.apply(H)
        P = Z @ w.layers[k].value
        H = relu(P)
        mask = None
        if dropout_rng is not None and cfg.dropout > 0:
            keep = 1.0 - cfg.dropout
            mask = (dropout_rng.random(H.shape) >= cfg.dropout) / keep
            H = H * mask
        cache.aggregates.append(Z)
        cache.pre.append(P)
        cache.masks.append(mask)
    if pool is not None:
        cache.pool_input = H
        H = sparse_dense_matmul(pool, H)
    return H + X0, cache


def gcm_backward(dY: np.ndarray, cache: GcmCache, w: GcmWeights, want_adjacency_grad=False):
    """Accumulate weight gradients; return ``(dX0, dA)``.

    ``dA`` is aligned with the data of the adjacency the propagations were
    built from (``None`` unless requested).
    """
    dA = None
    dH = dY
    if cache.pool is not None:
        dH = sparse_dense_matmul_backward(cache.pool, dH)
    for k in reversed(range(len(cache.props))):
        prop = cache.props[k]
        if cache.masks[k] is not None:
            dH = dH * cache.masks[k]
        dP = dH * (cache.pre[k] > 0)
        W = w.layers[k]
        W.grad += cache.aggregates[k].T @ dP
        dZ = dP @ W.value.T
        if want_adjacency_grad and prop.adjacency is not None:
            g = sparse_dense_matmul_data_grad(prop.adjacency, cache.inputs[k], dZ) * prop.coef
            dA = g if dA is None else dA + g
        dH = prop.backward(dZ)
    return dH + dY, dA


def _test_props(A, cfg):
    if cfg.mode == "gcn":
        return [full_propagation(A)] * cfg.depth, None
    identity = Propagation(None, None, 1.0)
    pool = mean_pool_operator(A) if cfg.mode == "meanpool" else None
    return [identity] * cfg.depth, pool


def gcm_forward(X0: np.ndarray, A: SparseAdjacency, w: GcmWeights, cfg: GcmConfig,
                training: bool = False, rng: Optional[np.random.Generator] = None,
                return_cache: bool = False):
    """Full-graph propagation (no sampling).

    With ``training=True`` and an ``rng``, dropout is applied to hidden
    features; otherwise the call is deterministic.
    """
    X0 = np.asarray(X0, dtype=np.float64)
    _check_inputs(X0, A, w, cfg)
    props, pool = _test_props(A, cfg)
    Y, cache = run_layers(X0, props, w, cfg, rng if training else None, pool)
    return (Y, cache) if return_cache else Y


def gcm_train_forward(X0: np.ndarray, A: SparseAdjacency, w: GcmWeights, cfg: GcmConfig,
                      rng: np.random.Generator, enumerate_neighbors: bool = False,
                      dropout: bool = True, return_cache: bool = False):
    """Training-time propagation with per-layer neighborhood sampling.

    ``enumerate_neighbors`` swaps the random draw for its expectation
    (every neighbor weighted ``1/deg``), a hook for exact testing.
    """
    X0 = np.asarray(X0, dtype=np.float64)
    _check_inputs(X0, A, w, cfg)
    if cfg.mode == "gcn":
        props = []
        for _ in range(cfg.depth):
            if enumerate_neighbors:
                props.append(enumerated_propagation(A))
            else:
                props.append(sample_propagation(A, cfg.sampling_size, rng))
        pool = None
    else:
        props, pool = _test_props(A, cfg)
    Y, cache = run_layers(X0, props, w, cfg, rng if dropout else None, pool)
    return (Y, cache) if return_cache else Y


def sampled_aggregate(i: int, X_prev: np.ndarray, A: SparseAdjacency, n_s: int,
                      W, rng: np.random.Generator) -> np.ndarray:
    """Sampled update of a single node.

    ``W`` may be a :class:`ParamTensor`, an array, or ``None`` to return
    the aggregate before the weight multiplication.
    """
    lo, hi = int(A.indptr[i]), int(A.indptr[i + 1])
    agg = np.zeros(X_prev.shape[1])
    if hi > lo:
        picks = lo + rng.integers(0, hi - lo, size=n_s)
        agg = (A.data[picks, None] * X_prev[A.indices[picks]]).sum(axis=0) / n_s
    agg = agg + X_prev[i]
    if W is None:
        return agg
    W = W.value if isinstance(W, ParamTensor) else np.asarray(W)
    return agg @ W
