"""Typed unit-graph construction and weighted adjacency.

Three edge kinds connect action units of one video:

* contextual  -- ``tiou(i, j) > theta_ctx``
* surrounding -- disjoint units with ``center_distance(i, j) < theta_sur``
* semantic    -- disjoint units where ``j`` is among the ``l`` cosine
  nearest neighbours of ``i`` (directed)

:func:`build_graph` is the fast path (a center-sorted sweep for the
temporal kinds, blocked matrix products for the kNN) and
:func:`build_graph_oracle` the exhaustive row-by-row reference.  Both
produce bit-identical edge lists.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from gcmtal.core import ActionUnit, Interval, ValidationError

CONTEXTUAL = "contextual"
SURROUNDING = "surrounding"
SEMANTIC = "semantic"
EDGE_KINDS = (CONTEXTUAL, SURROUNDING, SEMANTIC)
KIND_CODE = {k: c for c, k in enumerate(EDGE_KINDS)}

# row count above which the kNN switches to float32 candidate screening
PRUNE_ABOVE = 4096
_BLOCK_ROWS = 512


class DegenerateFeatureError(ValidationError):
    def __init__(self, message: str):
        super().__init__("degenerate-feature", message)


@dataclass(frozen=True)
class GraphParams:
    theta_ctx: float = 0.7
    theta_sur: float = 1.0
    semantic_l: int = 10
    one_stage_mode: bool = False
    # ablation switch; one_stage_mode removes "contextual" on top of this
    edge_kinds: frozenset = frozenset(EDGE_KINDS)

    def __post_init__(self):
        if not 0.0 < self.theta_ctx <= 1.0:
            raise ValueError(f"theta_ctx must lie in (0, 1], got {self.theta_ctx}")
        if not self.theta_sur > 0:
            raise ValueError(f"theta_sur must be > 0, got {self.theta_sur}")
        if self.semantic_l < 0:
            raise ValueError(f"semantic_l must be >= 0, got {self.semantic_l}")
        kinds = frozenset(self.edge_kinds)
        unknown = kinds - set(EDGE_KINDS)
        if unknown:
            raise ValueError(f"unknown edge kinds {sorted(unknown)}")
        object.__setattr__(self, "edge_kinds", kinds)

    @property
    def active_kinds(self) -> frozenset:
        if self.one_stage_mode:
            return self.edge_kinds - {CONTEXTUAL}
        return self.edge_kinds


@dataclass(eq=False)
class UnitGraph:
    """Directed typed edge list, sorted by ``(src, dst)``."""

    node_count: int
    src: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    dst: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    kind: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int8))

    @property
    def edges(self) -> list[tuple[int, int, str]]:
        return [
            (int(s), int(d), EDGE_KINDS[k])
            for s, d, k in zip(self.src, self.dst, self.kind)
        ]

    @property
    def edge_count(self) -> int:
        return int(self.src.shape[0])

    def indptr(self) -> np.ndarray:
        counts = np.bincount(self.src, minlength=self.node_count)
        return np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    def neighbors(self, i: int) -> np.ndarray:
        ptr = self.indptr()
        return self.dst[ptr[i]:ptr[i + 1]]

    def edges_of_kind(self, kind: str) -> set[tuple[int, int]]:
        m = self.kind == KIND_CODE[kind]
        return set(zip(self.src[m].tolist(), self.dst[m].tolist()))

    def __eq__(self, other):
        if not isinstance(other, UnitGraph):
            return NotImplemented
        return (
            self.node_count == other.node_count
            and np.array_equal(self.src, other.src)
            and np.array_equal(self.dst, other.dst)
            and np.array_equal(self.kind, other.kind)
        )

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(np.int64(self.node_count).tobytes())
        for arr in (self.src, self.dst, self.kind):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass(eq=False)
class SparseAdjacency:
    """CSR edge-weight matrix with ascending column indices in every row."""

    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    shape: tuple[int, int]

    @classmethod
    def from_graph(cls, g: UnitGraph, data: np.ndarray) -> "SparseAdjacency":
        return cls(g.indptr(), g.dst.astype(np.int64), np.asarray(data, np.float64),
                   (g.node_count, g.node_count))

    @classmethod
    def identity(cls, n: int) -> "SparseAdjacency":
        return cls(np.arange(n + 1, dtype=np.int64), np.arange(n, dtype=np.int64),
                   np.ones(n), (n, n))

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "SparseAdjacency":
        m = sp.csr_matrix(np.asarray(dense, np.float64))
        m.sort_indices()
        return cls(m.indptr.astype(np.int64), m.indices.astype(np.int64),
                   m.data.copy(), m.shape)

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))

    def with_data(self, data: np.ndarray) -> "SparseAdjacency":
        return SparseAdjacency(self.indptr, self.indices, np.asarray(data, np.float64), self.shape)

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.data, self.indices, self.indptr), shape=self.shape)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.row_ids(), self.indices] = self.data
        return out


# ---------------------------------------------------------------------------
# pairwise relations


def _pair_relations(s_a, e_a, s_b, e_b):
    """Elementwise (intersection, union, center distance) for interval arrays.

    Every code path that decides an edge goes through this function so the
    fast path and the oracle see identical floating point values.
    """
    inter = np.maximum(0.0, np.minimum(e_a, e_b) - np.maximum(s_a, s_b))
    union = (e_a - s_a) + (e_b - s_b) - inter
    dist = np.abs((s_a + e_a) / 2.0 - (s_b + e_b) / 2.0) / union
    return inter, union, dist


def tiou(a: Interval, b: Interval) -> float:
    inter, union, _ = _pair_relations(
        np.float64(a.start), np.float64(a.end), np.float64(b.start), np.float64(b.end))
    return float(inter / union)


def center_distance(a: Interval, b: Interval) -> float:
    """``|c_a - c_b| / U`` with ``U`` the same union measure used by :func:`tiou`."""
    _, _, dist = _pair_relations(
        np.float64(a.start), np.float64(a.end), np.float64(b.start), np.float64(b.end))
    return float(dist)


# ---------------------------------------------------------------------------
# cosine kNN


def _normalized(features: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(features, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    bad = np.flatnonzero(~(norms > 0))
    if bad.size:
        raise DegenerateFeatureError(f"feature row {int(bad[0])} has zero norm")
    return x / norms[:, None]


def _exact_cosines(xn: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    # correctly rounded sums of the elementwise products: independent of BLAS
    prods = (xn[rows] * xn[cols]).tolist()
    return np.fromiter((math.fsum(p) for p in prods), np.float64, len(prods))


def _screen_slack(dtype, d: int) -> float:
    # twice a generous bound on |approx - exact| for unit vectors
    return 8.0 * (d + 2) * float(np.finfo(dtype).eps)


def _finalize_topl(xn, rows, cols, l):
    """Pick, per row, the ``l`` candidates of largest exact cosine (ties -> lower index).

    ``rows``/``cols`` hold a candidate superset of every row's true top-l.
    Returns (rows, cols) of the selected pairs.
    """
    if rows.size == 0:
        return rows, cols
    exact = _exact_cosines(xn, rows, cols)
    order = np.lexsort((cols, -exact, rows))
    rows, cols = rows[order], cols[order]
    starts = np.flatnonzero(np.r_[True, rows[1:] != rows[:-1]])
    rank = np.arange(rows.size) - np.repeat(starts, np.diff(np.r_[starts, rows.size]))
    keep = rank < l
    return rows[keep], cols[keep]


def semantic_candidates(features: np.ndarray, i: int, l: int) -> set[int]:
    """Indices of the ``l`` rows most cosine-similar to row ``i`` (excluding ``i``)."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if l <= 0:
        return set()
    if l >= n:
        raise ValueError(f"l={l} must be smaller than the row count {n}")
    xn = _normalized(features)
    rows, cols = _knn_rows_oracle(xn, np.array([i]), l)
    return set(cols.tolist())


def _knn_rows_oracle(xn, row_ids, l):
    """Row-at-a-time reference: full stable ranking of approximate cosines."""
    n, d = xn.shape
    slack = _screen_slack(np.float64, d)
    idx = np.arange(n)
    out_r, out_c = [], []
    for i in row_ids:
        sims = xn @ xn[i]
        sims[i] = -np.inf
        ranked = np.lexsort((idx, -sims))
        kth = sims[ranked[l - 1]]
        cand = np.flatnonzero(sims >= kth - slack)
        out_r.append(np.full(cand.size, i, np.int64))
        out_c.append(cand.astype(np.int64))
    rows = np.concatenate(out_r) if out_r else np.zeros(0, np.int64)
    cols = np.concatenate(out_c) if out_c else np.zeros(0, np.int64)
    return _finalize_topl(xn, rows, cols, l)


def _knn_block(xn, xs, start, stop, l, slack):
    n = xn.shape[0]
    sims = xs[start:stop] @ xs.T
    sims[np.arange(stop - start), np.arange(start, stop)] = -np.inf
    m = max(128 * l, 1024)
    if n > 2 * m:
        # lower bound on each row's l-th largest from a column prefix
        prefix = sims[:, :m]
        bound = np.partition(prefix, m - l, axis=1)[:, m - l]
        r, c = np.nonzero(sims >= (bound - slack)[:, None])
        vals = sims[r, c]
        # second screen: l-th largest among the survivors
        order = np.lexsort((-vals, r))
        r, c, vals = r[order], c[order], vals[order]
        starts = np.flatnonzero(np.r_[True, r[1:] != r[:-1]])
        kth = vals[np.minimum(starts + l - 1, np.r_[starts[1:], r.size] - 1)]
        keep = vals >= np.repeat(kth, np.diff(np.r_[starts, r.size])) - slack
        r, c = r[keep], c[keep]
    else:
        kth = np.partition(sims, n - l, axis=1)[:, n - l]
        r, c = np.nonzero(sims >= (kth - slack)[:, None])
    return (r + start).astype(np.int64), c.astype(np.int64)


def _knn_fast(xn, l, workers=1):
    n, d = xn.shape
    dtype = np.float32 if n > PRUNE_ABOVE else np.float64
    xs = xn.astype(dtype)
    slack = _screen_slack(dtype, d)
    blocks = [(s, min(s + _BLOCK_ROWS, n)) for s in range(0, n, _BLOCK_ROWS)]
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda b: _knn_block(xn, xs, b[0], b[1], l, slack), blocks))
    else:
        parts = [_knn_block(xn, xs, s, t, l, slack) for s, t in blocks]
    rows = np.concatenate([p[0] for p in parts])
    cols = np.concatenate([p[1] for p in parts])
    return _finalize_topl(xn, rows, cols, l)


# ---------------------------------------------------------------------------
# graph assembly


def _unit_arrays(units: Sequence[ActionUnit]):
    n = len(units)
    starts = np.fromiter((u.interval.start for u in units), np.float64, n)
    ends = np.fromiter((u.interval.end for u in units), np.float64, n)
    if n:
        feats = np.stack([np.asarray(u.feature, np.float64) for u in units])
    else:
        feats = np.zeros((0, 0))
    vids = {u.video_id for u in units}
    if len(vids) > 1:
        raise ValueError(f"units span several videos: {sorted(vids)[:3]}")
    return starts, ends, feats


def _classify_pairs(i, j, starts, ends, p: GraphParams):
    """Kinds for temporal candidate pairs; -1 where no temporal rule fires."""
    inter, union, dist = _pair_relations(starts[i], ends[i], starts[j], ends[j])
    r = inter / union
    kinds = p.active_kinds
    out = np.full(i.shape, -1, np.int8)
    if SURROUNDING in kinds:
        out[(inter == 0) & (dist < p.theta_sur)] = KIND_CODE[SURROUNDING]
    if CONTEXTUAL in kinds:
        out[r > p.theta_ctx] = KIND_CODE[CONTEXTUAL]
    return out, inter


def _semantic_pairs(rows, cols, starts, ends):
    inter, _, _ = _pair_relations(starts[rows], ends[rows], starts[cols], ends[cols])
    keep = inter == 0
    return rows[keep], cols[keep]


def _assemble(n, t_src, t_dst, t_kind, s_src, s_dst) -> UnitGraph:
    key_t = t_src * n + t_dst
    key_s = s_src * n + s_dst
    # precedence: temporal kinds win over semantic for the same pair
    fresh = ~np.isin(key_s, key_t)
    src = np.concatenate([t_src, s_src[fresh]])
    dst = np.concatenate([t_dst, s_dst[fresh]])
    kind = np.concatenate([t_kind, np.full(int(fresh.sum()), KIND_CODE[SEMANTIC], np.int8)])
    order = np.argsort(src * n + dst, kind="stable")
    return UnitGraph(n, src[order].astype(np.int64), dst[order].astype(np.int64),
                     kind[order].astype(np.int8))


def _effective_l(p: GraphParams, n: int) -> int:
    if SEMANTIC not in p.active_kinds:
        return 0
    return min(p.semantic_l, max(n - 1, 0))


def build_graph(units: Sequence[ActionUnit], p: GraphParams = GraphParams(),
                workers: int = 1) -> UnitGraph:
    """Build the typed unit graph of one video (fast path)."""
    starts, ends, feats = _unit_arrays(units)
    n = starts.shape[0]
    if n == 0:
        return UnitGraph(0)
    lengths = ends - starts
    centers = (starts + ends) / 2.0
    kinds = p.active_kinds
    reach = 0.0
    if CONTEXTUAL in kinds:
        reach = 0.5
    if SURROUNDING in kinds:
        reach = max(reach, p.theta_sur)

    if reach > 0:
        order = np.argsort(centers, kind="stable")
        cs = centers[order]
        radius = reach * (lengths[order] + lengths.max()) * (1.0 + 1e-9) + 1e-12
        lo = np.searchsorted(cs, cs - radius, side="left")
        hi = np.searchsorted(cs, cs + radius, side="right")
        counts = hi - lo
        total = int(counts.sum())
        a = np.repeat(np.arange(n), counts)
        offs = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        b = np.repeat(lo, counts) + offs
        i, j = order[a], order[b]
        tk, _ = _classify_pairs(i, j, starts, ends, p)
        hit = tk >= 0
        t_src, t_dst, t_kind = i[hit], j[hit], tk[hit]
    else:
        t_src = t_dst = np.zeros(0, np.int64)
        t_kind = np.zeros(0, np.int8)

    l = _effective_l(p, n)
    if l > 0:
        rows, cols = _knn_fast(_normalized(feats), l, workers)
        s_src, s_dst = _semantic_pairs(rows, cols, starts, ends)
    else:
        s_src = s_dst = np.zeros(0, np.int64)
    return _assemble(n, t_src, t_dst, t_kind, s_src, s_dst)


def build_graph_oracle(units: Sequence[ActionUnit], p: GraphParams = GraphParams()) -> UnitGraph:
    """Exhaustive reference: every ordered pair is tested against every rule."""
    starts, ends, feats = _unit_arrays(units)
    n = starts.shape[0]
    if n == 0:
        return UnitGraph(0)
    l = _effective_l(p, n)
    xn = _normalized(feats) if l > 0 else None
    all_j = np.arange(n)
    t_src, t_dst, t_kind, s_src, s_dst = [], [], [], [], []
    for i in range(n):
        ii = np.full(n, i)
        tk, inter = _classify_pairs(ii, all_j, starts, ends, p)
        hit = np.flatnonzero(tk >= 0)
        t_src.append(ii[hit])
        t_dst.append(hit)
        t_kind.append(tk[hit])
        if l > 0:
            _, nbrs = _knn_rows_oracle(xn, [i], l)
            nbrs = nbrs[inter[nbrs] == 0]
            s_src.append(np.full(nbrs.size, i, np.int64))
            s_dst.append(nbrs)
    cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt)
    return _assemble(n, cat(t_src, np.int64), cat(t_dst, np.int64), cat(t_kind, np.int8),
                     cat(s_src, np.int64), cat(s_dst, np.int64))


# ---------------------------------------------------------------------------
# adjacency


def row_softmax(scores, indptr):
    """Softmax of CSR-aligned ``scores`` within each row."""
    n = indptr.shape[0] - 1
    rows = np.repeat(np.arange(n), np.diff(indptr))
    peak = np.full(n, -np.inf)
    np.maximum.at(peak, rows, scores)
    z = np.exp(scores - peak[rows])
    return z / np.bincount(rows, z, minlength=n)[rows]


def compute_adjacency(g: UnitGraph, features: np.ndarray, scheme: str = "cosine",
                      params: Optional[tuple] = None) -> SparseAdjacency:
    """Edge weights for ``g``.

    Schemes: ``"cosine"``, ``"embed_cosine"`` (``params=(E1, E2)``, cosine of
    ``x_i E1`` and ``x_j E2``), ``"attention"`` (``params=(W1, W2)``, softmax of
    ``(x_i W1) . (x_j W2)`` over each row's edges) and ``"uniform"``.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.shape[0] != g.node_count:
        raise ValueError(f"graph has {g.node_count} nodes but features have {x.shape[0]} rows")
    src, dst = g.src, g.dst
    if scheme == "uniform":
        data = np.ones(g.edge_count)
    elif scheme == "cosine":
        xn = _checked_unit_rows(x, src, dst)
        data = np.einsum("ij,ij->i", xn[src], xn[dst])
    elif scheme == "embed_cosine":
        e1, e2 = params
        q = _checked_unit_rows(x @ e1, src, dst, only=src)
        k = _checked_unit_rows(x @ e2, src, dst, only=dst)
        data = np.einsum("ij,ij->i", q[src], k[dst])
    elif scheme == "attention":
        w1, w2 = params
        scores = np.einsum("ij,ij->i", (x @ w1)[src], (x @ w2)[dst])
        data = row_softmax(scores, g.indptr())
    else:
        raise ValueError(f"unknown adjacency scheme {scheme!r}")
    return SparseAdjacency.from_graph(g, data)


def _checked_unit_rows(x, src, dst, only=None):
    used = np.unique(np.concatenate([src, dst]) if only is None else only)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    bad = used[~(norms[used] > 0)]
    if bad.size:
        raise DegenerateFeatureError(f"feature row {int(bad[0])} has zero norm")
    safe = np.where(norms > 0, norms, 1.0)
    return x / safe[:, None]


def dump_graph(g: UnitGraph, adjacency: Optional[SparseAdjacency] = None) -> str:
    """Text dump: one ``src dst kind weight`` line per edge, sorted by (src, dst)."""
    weights = adjacency.data if adjacency is not None else np.ones(g.edge_count)
    lines = [
        f"{s} {d} {EDGE_KINDS[k]} {float(w)!r}"
        for s, d, k, w in zip(g.src.tolist(), g.dst.tolist(), g.kind.tolist(), weights)
    ]
    return "\n".join(lines) + ("\n" if lines else "")
