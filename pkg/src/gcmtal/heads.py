"""Detection heads, offset parameterization, target assignment and losses.

Two head layouts are supported:

``two_gcm``
    One GCM on the unit features feeds the classifier, a second GCM on the
    extended features feeds the boundary regressor and the completeness
    predictor.  Both GCMs share the graph but not their weights.
``single_gcm``
    One GCM feeding a classifier and a regressor; completeness is fixed to 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from gcmtal.core import ActionUnit, GroundTruthInstance, Interval, ValidationError
from gcmtal.gcm import (
    GcmConfig,
    GcmWeights,
    gcm_backward,
    gcm_forward,
    gcm_train_forward,
)
from gcmtal.graphbuild import (
    GraphParams,
    SparseAdjacency,
    UnitGraph,
    build_graph,
    compute_adjacency,
    row_softmax,
)
from gcmtal.numkernel import ParamTensor, dense_affine, dense_affine_backward, softmax_rows

HEAD_TYPES = ("two_gcm", "single_gcm")
ADJACENCY_SCHEMES = ("cosine", "embed_cosine", "attention", "uniform")


# ---------------------------------------------------------------------------
# interval helpers


def extend_interval(i: Interval) -> Interval:
    """Grow by half the length on each side, clamped at 0 on the left."""
    half = (i.end - i.start) / 2.0
    return Interval(max(0.0, i.start - half), i.end + half)


def encode_offsets(unit: Interval, gt: Interval) -> tuple[float, float]:
    c_u, l_u = (unit.start + unit.end) / 2.0, unit.end - unit.start
    c_g, l_g = (gt.start + gt.end) / 2.0, gt.end - gt.start
    return (c_u - c_g) / l_u, math.log(l_u / l_g)


def decode_offsets(unit: Interval, o: Sequence[float]) -> Interval:
    c_u, l_u = (unit.start + unit.end) / 2.0, unit.end - unit.start
    c_g = c_u - o[0] * l_u
    l_g = l_u / math.exp(o[1])
    return Interval(c_g - l_g / 2.0, c_g + l_g / 2.0)


def decode_offsets_array(starts, ends, offsets):
    """Vectorized :func:`decode_offsets`; ``offsets`` has columns (o_c, o_l)."""
    c_u, l_u = (starts + ends) / 2.0, ends - starts
    c_g = c_u - offsets[:, 0] * l_u
    l_g = l_u / np.exp(offsets[:, 1])
    return c_g - l_g / 2.0, c_g + l_g / 2.0


# ---------------------------------------------------------------------------
# targets and losses


@dataclass
class HeadOutputs:
    class_probs: np.ndarray
    completeness: np.ndarray
    offsets: np.ndarray
    logits: Optional[np.ndarray] = None
    has_completeness: bool = True


@dataclass
class Targets:
    label: np.ndarray
    completeness_label: np.ndarray
    offset_target: np.ndarray
    reg_mask: np.ndarray
    com_mask: np.ndarray

    @classmethod
    def concat(cls, parts: Sequence["Targets"]) -> "Targets":
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("label", "completeness_label", "offset_target",
                               "reg_mask", "com_mask")))


@dataclass(frozen=True)
class TargetConfig:
    foreground_tiou: float = 0.5
    complete_tiou: float = 0.7


@dataclass
class LossBundle:
    l_cls: float
    l_com: float
    l_reg: float
    l_total: float
    lambda1: float = 0.5
    lambda2: float = 0.5


def assign_targets(units: Sequence[ActionUnit], gts: Sequence[GroundTruthInstance],
                   cfg: TargetConfig = TargetConfig()) -> Targets:
    n = len(units)
    label = np.zeros(n, np.int64)
    complete = np.zeros(n, np.int64)
    offsets = np.zeros((n, 2))
    if n and gts:
        us = np.array([u.interval.start for u in units])
        ue = np.array([u.interval.end for u in units])
        gs = np.array([g.interval.start for g in gts])
        ge = np.array([g.interval.end for g in gts])
        inter = np.maximum(0.0, np.minimum(ue[:, None], ge[None]) - np.maximum(us[:, None], gs[None]))
        union = (ue - us)[:, None] + (ge - gs)[None] - inter
        iou = inter / union
        cdist = np.abs((us + ue)[:, None] / 2.0 - (gs + ge)[None] / 2.0)
        for i in range(n):
            # highest tIoU, then nearest center, then earliest listed
            best = int(np.lexsort((np.arange(len(gts)), cdist[i], -iou[i]))[0])
            r = iou[i, best]
            if r >= cfg.foreground_tiou:
                label[i] = gts[best].label
            if r >= cfg.complete_tiou:
                complete[i] = 1
            offsets[i] = encode_offsets(units[i].interval, gts[best].interval)
    fg = label >= 1
    return Targets(label, complete, offsets, fg & (complete == 1), fg)


def smooth_l1(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def hinge(e: np.ndarray, e_hat: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, 1.0 - (2.0 * e - 1.0) * e_hat)


def _target_offsets(out: HeadOutputs, tgt: Targets) -> np.ndarray:
    # per-class regressors: columns (2(c-1), 2(c-1)+1) belong to class c
    cls = np.maximum(tgt.label, 1) - 1
    rows = np.arange(tgt.label.shape[0])
    return np.stack([out.offsets[rows, 2 * cls], out.offsets[rows, 2 * cls + 1]], axis=1)


def compute_losses(out: HeadOutputs, tgt: Targets, lambda1: float = 0.5,
                   lambda2: float = 0.5) -> LossBundle:
    n = tgt.label.shape[0]
    if out.class_probs.shape[0] != n:
        raise ValueError("head outputs and targets disagree on the unit count")
    rows = np.arange(n)
    if out.logits is not None:
        z = out.logits - out.logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        l_cls = float(-logp[rows, tgt.label].mean()) if n else 0.0
    else:
        l_cls = float(-np.log(out.class_probs[rows, tgt.label]).mean()) if n else 0.0
    l_com = 0.0
    if out.has_completeness and tgt.com_mask.any():
        m = tgt.com_mask
        l_com = float(hinge(tgt.completeness_label[m], out.completeness[m]).sum() / m.sum())
    l_reg = 0.0
    if tgt.reg_mask.any():
        m = tgt.reg_mask
        diff = _target_offsets(out, tgt)[m] - tgt.offset_target[m]
        l_reg = float(smooth_l1(diff).sum() / m.sum())
    total = l_cls + lambda1 * l_com + lambda2 * l_reg
    return LossBundle(l_cls, l_com, l_reg, total, lambda1, lambda2)


def loss_gradients(out: HeadOutputs, tgt: Targets, lambda1: float = 0.5, lambda2: float = 0.5):
    """Gradients of ``l_total`` w.r.t. (logits, completeness, offsets)."""
    n = tgt.label.shape[0]
    rows = np.arange(n)
    d_logits = out.class_probs.copy()
    d_logits[rows, tgt.label] -= 1.0
    d_logits /= max(n, 1)
    d_com = np.zeros(n)
    if out.has_completeness and tgt.com_mask.any():
        m = tgt.com_mask
        sign = 2.0 * tgt.completeness_label - 1.0
        active = (1.0 - sign * out.completeness) > 0
        d_com = np.where(m & active, -sign, 0.0) * (lambda1 / m.sum())
    d_off = np.zeros_like(out.offsets)
    if tgt.reg_mask.any():
        m = tgt.reg_mask
        diff = _target_offsets(out, tgt) - tgt.offset_target
        g = np.clip(diff, -1.0, 1.0) * (lambda2 / m.sum())
        g[~m] = 0.0
        cls = np.maximum(tgt.label, 1) - 1
        d_off[rows, 2 * cls] = g[:, 0]
        d_off[rows, 2 * cls + 1] = g[:, 1]
    return d_logits, d_com, d_off


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class HeadConfig:
    num_classes: int = 5
    head_type: str = "two_gcm"
    bias: bool = True
    adjacency: str = "cosine"
    attention_dim: int = 16

    def __post_init__(self):
        if self.head_type not in HEAD_TYPES:
            raise ValueError(f"head_type must be one of {HEAD_TYPES}")
        if self.adjacency not in ADJACENCY_SCHEMES:
            raise ValueError(f"adjacency must be one of {ADJACENCY_SCHEMES}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")


@dataclass
class VideoBatch:
    """Everything the model needs for one video (or a block-diagonal stack)."""

    features: np.ndarray
    extended: Optional[np.ndarray]
    graph: UnitGraph
    adjacency: Optional[SparseAdjacency]
    starts: np.ndarray
    ends: np.ndarray
    targets: Optional[Targets] = None
    video_ids: list = field(default_factory=list)
    unit_ids: Optional[np.ndarray] = None


def prepare_video(units: Sequence[ActionUnit], graph_params: GraphParams, head_cfg: HeadConfig,
                  gts: Optional[Sequence[GroundTruthInstance]] = None,
                  target_cfg: TargetConfig = TargetConfig(),
                  embed: Optional[tuple] = None, graph: Optional[UnitGraph] = None) -> VideoBatch:
    X = np.stack([np.asarray(u.feature, np.float64) for u in units])
    ext = None
    if units[0].extended_feature is not None:
        ext = np.stack([np.asarray(u.extended_feature, np.float64) for u in units])
    g = graph if graph is not None else build_graph(units, graph_params)
    A = None
    if head_cfg.adjacency in ("cosine", "uniform"):
        A = compute_adjacency(g, X, head_cfg.adjacency)
    elif head_cfg.adjacency == "embed_cosine":
        A = compute_adjacency(g, X, "embed_cosine", embed)
    tgt = assign_targets(units, gts, target_cfg) if gts is not None else None
    return VideoBatch(
        X, ext, g, A,
        np.array([u.interval.start for u in units]),
        np.array([u.interval.end for u in units]),
        tgt, [units[0].video_id] * len(units),
        np.array([u.id for u in units]),
    )


def concat_batches(batches: Sequence[VideoBatch]) -> VideoBatch:
    """Block-diagonal union of several videos."""
    if len(batches) == 1:
        return batches[0]
    offs = np.cumsum([0] + [b.graph.node_count for b in batches])
    n = int(offs[-1])
    g = UnitGraph(
        n,
        np.concatenate([b.graph.src + o for b, o in zip(batches, offs)]),
        np.concatenate([b.graph.dst + o for b, o in zip(batches, offs)]),
        np.concatenate([b.graph.kind for b in batches]),
    )
    A = None
    if batches[0].adjacency is not None:
        A = SparseAdjacency.from_graph(g, np.concatenate([b.adjacency.data for b in batches]))
    ext = None
    if batches[0].extended is not None:
        ext = np.concatenate([b.extended for b in batches])
    tgt = None
    if batches[0].targets is not None:
        tgt = Targets.concat([b.targets for b in batches])
    return VideoBatch(
        np.concatenate([b.features for b in batches]), ext, g, A,
        np.concatenate([b.starts for b in batches]),
        np.concatenate([b.ends for b in batches]),
        tgt, sum((b.video_ids for b in batches), []),
        np.concatenate([b.unit_ids for b in batches]),
    )


REG_INIT_STD = 1e-3


class DetectorModel:
    """GCM(s) plus FC heads; parameters are :class:`ParamTensor` objects."""

    def __init__(self, d: int, gcm_cfg: GcmConfig, head_cfg: HeadConfig,
                 rng: np.random.Generator, init_scale: float = 1.0):
        self.d = d
        self.gcm_cfg = gcm_cfg
        self.head_cfg = head_cfg
        C = head_cfg.num_classes
        fc_std = 1.0 / np.sqrt(d)
        two = head_cfg.head_type == "two_gcm"
        self.gcm_a = GcmWeights.init(gcm_cfg, d, rng, init_scale, "gcm1" if two else "gcm3")
        self.gcm_b = GcmWeights.init(gcm_cfg, d, rng, init_scale, "gcm2") if two else None
        self.fc_cls = ParamTensor(rng.normal(0, fc_std, (d, C + 1)), "fc_cls.W")
        # offsets are small numbers; start the regressor near zero
        self.fc_reg = ParamTensor(rng.normal(0, REG_INIT_STD, (d, 2 * C)), "fc_reg.W")
        self.fc_com = ParamTensor(rng.normal(0, fc_std, (d, 1)), "fc_com.W") if two else None
        self.b_cls = self.b_reg = self.b_com = None
        if head_cfg.bias:
            self.b_cls = ParamTensor(np.zeros(C + 1), "fc_cls.b")
            self.b_reg = ParamTensor(np.zeros(2 * C), "fc_reg.b")
            self.b_com = ParamTensor(np.zeros(1), "fc_com.b") if two else None
        self.att_q = self.att_k = None
        if head_cfg.adjacency == "attention":
            a = head_cfg.attention_dim
            self.att_q = ParamTensor(rng.normal(0, fc_std, (d, a)), "att.W1")
            self.att_k = ParamTensor(rng.normal(0, fc_std, (d, a)), "att.W2")

    @property
    def two_gcm(self) -> bool:
        return self.head_cfg.head_type == "two_gcm"

    def parameters(self) -> list[ParamTensor]:
        ps = list(self.gcm_a.layers)
        if self.gcm_b is not None:
            ps += self.gcm_b.layers
        for p in (self.fc_cls, self.b_cls, self.fc_reg, self.b_reg, self.fc_com, self.b_com,
                  self.att_q, self.att_k):
            if p is not None:
                ps.append(p)
        return ps

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # -- adjacency ---------------------------------------------------------

    def adjacency(self, batch: VideoBatch):
        if self.head_cfg.adjacency != "attention":
            return batch.adjacency, None
        X, g = batch.features, batch.graph
        q = X @ self.att_q.value
        k = X @ self.att_k.value
        scores = np.einsum("ij,ij->i", q[g.src], k[g.dst])
        data = row_softmax(scores, g.indptr())
        return SparseAdjacency.from_graph(g, data), (q, k, data)

    def _adjacency_backward(self, batch, att_cache, dA):
        q, k, a = att_cache
        g = batch.graph
        rows = g.src
        inner = np.bincount(rows, a * dA, minlength=g.node_count)
        ds = a * (dA - inner[rows])
        dq = np.zeros_like(q)
        dk = np.zeros_like(k)
        np.add.at(dq, rows, ds[:, None] * k[g.dst])
        np.add.at(dk, g.dst, ds[:, None] * q[rows])
        self.att_q.grad += batch.features.T @ dq
        self.att_k.grad += batch.features.T @ dk

    # -- forward/backward --------------------------------------------------

    def _gcm(self, X, A, w, training, rng, sample):
        if not training:
            return gcm_forward(X, A, w, self.gcm_cfg, return_cache=True)
        if sample:
            return gcm_train_forward(X, A, w, self.gcm_cfg, rng, return_cache=True)
        return gcm_forward(X, A, w, self.gcm_cfg, training=True, rng=rng, return_cache=True)

    def forward(self, batch: VideoBatch, training: bool = False,
                rng: Optional[np.random.Generator] = None, sample: bool = True):
        A, att = self.adjacency(batch)
        if A is None:
            raise ValueError("batch carries no adjacency")
        Ya, ca = self._gcm(batch.features, A, self.gcm_a, training, rng, sample)
        logits = dense_affine(Ya, self.fc_cls, self.b_cls)
        probs = softmax_rows(logits)
        cb = None
        if self.two_gcm:
            if batch.extended is None:
                raise ValidationError("dimension-mismatch", "two_gcm heads need extended features")
            Yb, cb = self._gcm(batch.extended, A, self.gcm_b, training, rng, sample)
            offsets = dense_affine(Yb, self.fc_reg, self.b_reg)
            comp = dense_affine(Yb, self.fc_com, self.b_com)[:, 0]
        else:
            Yb = Ya
            offsets = dense_affine(Ya, self.fc_reg, self.b_reg)
            comp = np.ones(Ya.shape[0])
        out = HeadOutputs(probs, comp, offsets, logits, self.two_gcm)
        return out, (Ya, ca, Yb, cb, att)

    def backward(self, batch: VideoBatch, cache, d_logits, d_com, d_off):
        Ya, ca, Yb, cb, att = cache
        want_dA = att is not None
        dYa = dense_affine_backward(d_logits, Ya, self.fc_cls, self.b_cls)
        if self.two_gcm:
            dYb = dense_affine_backward(d_off, Yb, self.fc_reg, self.b_reg)
            dYb = dYb + dense_affine_backward(d_com[:, None], Yb, self.fc_com, self.b_com)
            _, dA_b = gcm_backward(dYb, cb, self.gcm_b, want_dA)
        else:
            dYa = dYa + dense_affine_backward(d_off, Ya, self.fc_reg, self.b_reg)
            dA_b = None
        _, dA_a = gcm_backward(dYa, ca, self.gcm_a, want_dA)
        if want_dA:
            dA = dA_a if dA_b is None else dA_a + dA_b
            self._adjacency_backward(batch, att, dA)

    def loss_and_grad(self, batch: VideoBatch, training: bool = True,
                      rng: Optional[np.random.Generator] = None, lambda1=0.5, lambda2=0.5,
                      sample: bool = True) -> LossBundle:
        """Forward, loss, backward; gradients are accumulated into the parameters."""
        out, cache = self.forward(batch, training, rng, sample)
        losses = compute_losses(out, batch.targets, lambda1, lambda2)
        grads = loss_gradients(out, batch.targets, lambda1, lambda2)
        self.backward(batch, cache, *grads)
        return losses

    def predict(self, batch: VideoBatch) -> HeadOutputs:
        return self.forward(batch, training=False)[0]


# ---------------------------------------------------------------------------
# functional head entry points


def _fc(Y, W, b):
    out = Y @ W
    return out + b if b is not None else out


def two_gcm_heads(X: np.ndarray, X_ext: Optional[np.ndarray], A: SparseAdjacency,
                  model: DetectorModel) -> HeadOutputs:
    """Classifier from GCM1 on ``X``; regressor and completeness from GCM2 on ``X_ext``."""
    if X_ext is None:
        raise ValidationError("dimension-mismatch", "extended features are required")
    if X.shape[0] != X_ext.shape[0]:
        raise ValueError("features and extended features disagree on the unit count")
    cfg = model.gcm_cfg
    Y1 = gcm_forward(X, A, model.gcm_a, cfg)
    Y2 = gcm_forward(X_ext, A, model.gcm_b, cfg)
    v = lambda p: p.value if p is not None else None
    logits = _fc(Y1, model.fc_cls.value, v(model.b_cls))
    return HeadOutputs(softmax_rows(logits), _fc(Y2, model.fc_com.value, v(model.b_com))[:, 0],
                       _fc(Y2, model.fc_reg.value, v(model.b_reg)), logits, True)


def single_gcm_head(X: np.ndarray, A: SparseAdjacency, model: DetectorModel) -> HeadOutputs:
    cfg = model.gcm_cfg
    Y = gcm_forward(X, A, model.gcm_a, cfg)
    v = lambda p: p.value if p is not None else None
    logits = _fc(Y, model.fc_cls.value, v(model.b_cls))
    return HeadOutputs(softmax_rows(logits), np.ones(X.shape[0]),
                       _fc(Y, model.fc_reg.value, v(model.b_reg)), logits, False)


def one_stage_enhance(F: np.ndarray, weights: GcmWeights, gcm_cfg: GcmConfig = GcmConfig(),
                      graph_params: GraphParams = GraphParams(one_stage_mode=True)) -> np.ndarray:
    """Relation-aware 1-D feature map of the same shape as ``F``.

    Row ``t`` is treated as the segment ``[t, t+1)``; only surrounding and
    semantic edges are used.
    """
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] == 0:
        raise ValueError("feature map must be a non-empty T x C matrix")
    T = F.shape[0]
    if not graph_params.one_stage_mode:
        graph_params = GraphParams(graph_params.theta_ctx, graph_params.theta_sur,
                                   graph_params.semantic_l, True, graph_params.edge_kinds)
    units = [ActionUnit(t, "_map", Interval(float(t), float(t + 1)), F[t]) for t in range(T)]
    g = build_graph(units, graph_params)
    A = compute_adjacency(g, F, "cosine")
    return gcm_forward(F, A, weights, gcm_cfg)


def one_stage_enhance_multiscale(maps: Sequence[np.ndarray], weights: Sequence[GcmWeights],
                                 gcm_cfg: GcmConfig = GcmConfig(),
                                 graph_params: GraphParams = GraphParams(one_stage_mode=True)):
    """Apply :func:`one_stage_enhance` to each temporal scale with its own weights."""
    return [one_stage_enhance(F, w, gcm_cfg, graph_params) for F, w in zip(maps, weights)]
