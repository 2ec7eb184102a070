"""Testing-time pipeline: score fusion, per-class NMS, tIoU matching, AP/mAP."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from gcmtal.core import GroundTruthInstance, Interval
from gcmtal.graphbuild import tiou

THUMOS_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5)
ACTIVITYNET_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))


@dataclass(frozen=True)
class Detection:
    video_id: str
    interval: Interval
    label: int
    score: float


@dataclass(frozen=True)
class EvalConfig:
    tiou_thresholds: tuple = THUMOS_THRESHOLDS
    nms_threshold: float = 0.5
    top_k: int = 800
    stream_fusion_weights: tuple = (2.0, 3.0)

    def __post_init__(self):
        if not all(0 < t < 1 for t in self.tiou_thresholds):
            raise ValueError("tIoU thresholds must lie in (0, 1)")
        object.__setattr__(self, "tiou_thresholds", tuple(float(t) for t in self.tiou_thresholds))

    @classmethod
    def activitynet(cls) -> "EvalConfig":
        return cls(tiou_thresholds=ACTIVITYNET_THRESHOLDS, top_k=100)


def stream_score(cls_prob, completeness):
    """Per-stream detection score: classification times completeness."""
    return np.asarray(cls_prob) * np.asarray(completeness)


def fuse_scores(cls_prob=None, completeness=1.0, rgb_score=None, flow_score=None,
                weights=(2.0, 3.0)):
    """Final score of a detection.

    With both stream scores given they are averaged with ``weights``
    (RGB:flow); with one, it is returned unchanged; with neither, the
    single-stream score ``cls_prob * completeness`` is returned.
    """
    if rgb_score is not None and flow_score is not None:
        w_rgb, w_flow = weights
        return (w_rgb * np.asarray(rgb_score) + w_flow * np.asarray(flow_score)) / (w_rgb + w_flow)
    if rgb_score is not None:
        return rgb_score
    if flow_score is not None:
        return flow_score
    return stream_score(cls_prob, completeness)


def completeness_to_score(raw: np.ndarray) -> np.ndarray:
    """Map hinge-trained completeness margins (+1 complete, -1 incomplete) to [0, 1]."""
    return np.clip((np.asarray(raw) + 1.0) / 2.0, 0.0, 1.0)


def _rank_key(d: Detection):
    return (-d.score, d.interval.start)


def nms(dets: Sequence[Detection], threshold: float = 0.5) -> list[Detection]:
    """Greedy suppression run separately for every (video, label) group.

    Kept detections are returned ordered by (score desc, start asc) within
    each group, groups in order of first appearance.
    """
    groups: dict = {}
    for d in dets:
        groups.setdefault((d.video_id, d.label), []).append(d)
    kept = []
    for group in groups.values():
        group = sorted(group, key=_rank_key)
        s = np.array([d.interval.start for d in group])
        e = np.array([d.interval.end for d in group])
        alive = np.ones(len(group), bool)
        for i in range(len(group)):
            if not alive[i]:
                continue
            kept.append(group[i])
            inter = np.maximum(0.0, np.minimum(e[i], e[i + 1:]) - np.maximum(s[i], s[i + 1:]))
            union = (e[i] - s[i]) + (e[i + 1:] - s[i + 1:]) - inter
            alive[i + 1:] &= ~(inter / union > threshold)
    return kept


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from a ranked true-positive flag vector."""
    if n_gt == 0:
        return float("nan")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    prec = ctp / np.arange(1, tp.size + 1)
    rec = ctp / n_gt
    mprec = np.concatenate([[0.0], prec, [0.0]])
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mprec = np.maximum.accumulate(mprec[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruthInstance],
                     threshold: float) -> np.ndarray:
    """True-positive flags for ``dets`` (one class) in ranked order.

    Each detection, by descending score, takes the still-unmatched ground
    truth of its video with the highest tIoU strictly above ``threshold``
    (ties: earlier start).
    """
    by_video: dict = {}
    for k, g in enumerate(gts):
        by_video.setdefault(g.video_id, []).append(g)
    for v in by_video:
        by_video[v].sort(key=lambda g: g.interval.start)
    used = {v: np.zeros(len(gs), bool) for v, gs in by_video.items()}
    tp = np.zeros(len(dets))
    for k, d in enumerate(dets):
        cands = by_video.get(d.video_id)
        if not cands:
            continue
        ious = np.array([tiou(d.interval, g.interval) for g in cands])
        ious[used[d.video_id]] = -1.0
        best = int(np.argmax(ious))  # first maximum = earliest start
        if ious[best] > threshold:
            used[d.video_id][best] = True
            tp[k] = 1.0
    return tp


def rank_detections(dets: Iterable[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: (-d.score, d.video_id, d.interval.start, d.interval.end))


@dataclass
class EvalResult:
    thresholds: tuple
    ap: dict  # threshold -> {class: AP}
    mean_ap: dict  # threshold -> mAP or None

    def average_map(self) -> Optional[float]:
        vals = [v for v in self.mean_ap.values() if v is not None]
        return float(np.mean(vals)) if vals else None

    def table(self) -> str:
        head = "mAP@tIoU  " + "  ".join(f"{t:>5.2f}" for t in self.thresholds)
        vals = "          " + "  ".join(
            "  n/a" if self.mean_ap[t] is None else f"{100 * self.mean_ap[t]:5.2f}"
            for t in self.thresholds)
        return head + "\n" + vals

    def json_lines(self) -> str:
        rows = []
        for t in self.thresholds:
            rows.append(json.dumps({"tiou": t, "mAP": self.mean_ap[t],
                                    "ap": {str(c): a for c, a in sorted(self.ap[t].items())}},
                                   sort_keys=True))
        return "\n".join(rows)


def evaluate_map(dets: Sequence[Detection], gts: Sequence[GroundTruthInstance],
                 cfg: EvalConfig = EvalConfig()) -> EvalResult:
    classes = sorted({g.label for g in gts})
    gts_by_class = {c: [g for g in gts if g.label == c] for c in classes}
    dets_by_class: dict = {c: [] for c in classes}
    for d in dets:
        if d.label in dets_by_class:
            dets_by_class[d.label].append(d)
    ranked = {c: rank_detections(ds) for c, ds in dets_by_class.items()}
    ap, mean_ap = {}, {}
    for t in cfg.tiou_thresholds:
        ap[t] = {}
        for c in classes:
            tp = match_detections(ranked[c], gts_by_class[c], t)
            ap[t][c] = interpolated_ap(tp, len(gts_by_class[c]))
        mean_ap[t] = float(np.mean(list(ap[t].values()))) if classes else None
    return EvalResult(tuple(cfg.tiou_thresholds), ap, mean_ap)


# ---------------------------------------------------------------------------
# from head outputs to detections


def video_detections(video_ids: Sequence[str], starts: np.ndarray, ends: np.ndarray,
                     class_probs: np.ndarray, completeness: np.ndarray, offsets: np.ndarray,
                     cfg: EvalConfig = EvalConfig(), regress: bool = True) -> list[Detection]:
    """Per-unit, per-foreground-class detections, top-k per video, then NMS.

    ``completeness`` is already a [0, 1] score; ``offsets`` hold per-class
    (center, log-length) pairs.
    """
    from gcmtal.heads import decode_offsets_array

    n, c1 = class_probs.shape
    scores = stream_score(class_probs[:, 1:], completeness[:, None])
    vids = np.asarray(video_ids)
    out = []
    for v in dict.fromkeys(video_ids):
        rows = np.flatnonzero(vids == v)
        flat = scores[rows].ravel()
        order = np.lexsort((np.arange(flat.size), -flat))[: cfg.top_k]
        for k in order:
            r, c = rows[k // (c1 - 1)], k % (c1 - 1)
            if regress:
                s, e = decode_offsets_array(starts[r:r + 1], ends[r:r + 1],
                                            offsets[r:r + 1, 2 * c:2 * c + 2])
                s, e = float(s[0]), float(e[0])
            else:
                s, e = float(starts[r]), float(ends[r])
            if not (np.isfinite(s) and np.isfinite(e) and e > s):
                s, e = float(starts[r]), float(ends[r])
            out.append(Detection(str(v), Interval(s, e), int(c) + 1, float(flat[k])))
    return nms(out, cfg.nms_threshold)


def detections_to_lines(dets: Sequence[Detection]) -> str:
    return "\n".join(
        json.dumps({"video_id": d.video_id, "start": d.interval.start, "end": d.interval.end,
                    "label": d.label, "score": d.score}, sort_keys=True)
        for d in dets)
