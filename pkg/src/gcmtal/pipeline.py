"""End-to-end glue: prepare data, train, detect, evaluate."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from gcmtal.core import Interval
from gcmtal.evaluator import (
    Detection,
    EvalConfig,
    EvalResult,
    completeness_to_score,
    evaluate_map,
    fuse_scores,
    nms,
    video_detections,
)
from gcmtal.gcm import GcmConfig
from gcmtal.graphbuild import GraphParams, tiou
from gcmtal.heads import DetectorModel, HeadConfig, VideoBatch
from gcmtal.trainer import TrainConfig, TrainReport, fit, prepare_dataset


def ground_truth_list(ds) -> list:
    return [g for gts in ds.ground_truths.values() for g in gts]


def _scored_outputs(model: DetectorModel, batch: VideoBatch):
    out = model.predict(batch)
    comp = completeness_to_score(out.completeness) if out.has_completeness else out.completeness
    return out.class_probs, comp, out.offsets


def detect(model: DetectorModel, batches: Sequence[VideoBatch],
           cfg: EvalConfig = EvalConfig()) -> list[Detection]:
    dets = []
    for b in batches:
        probs, comp, offs = _scored_outputs(model, b)
        dets += video_detections(b.video_ids, b.starts, b.ends, probs, comp, offs, cfg)
    return dets


def detect_two_stream(models: Mapping[str, DetectorModel],
                      batches: Mapping[str, Sequence[VideoBatch]],
                      cfg: EvalConfig = EvalConfig()) -> list[Detection]:
    """Fuse RGB and flow per-stream scores (and offsets) with the configured ratio."""
    w_rgb, w_flow = cfg.stream_fusion_weights
    dets = []
    for b_rgb, b_flow in zip(batches["rgb"], batches["flow"]):
        p_r, c_r, o_r = _scored_outputs(models["rgb"], b_rgb)
        p_f, c_f, o_f = _scored_outputs(models["flow"], b_flow)
        s_r = p_r * c_r[:, None]
        s_f = p_f * c_f[:, None]
        fused = fuse_scores(rgb_score=s_r, flow_score=s_f, weights=(w_rgb, w_flow))
        offs = (w_rgb * o_r + w_flow * o_f) / (w_rgb + w_flow)
        # scores are already fused: pass them as class probabilities with unit completeness
        dets += video_detections(b_rgb.video_ids, b_rgb.starts, b_rgb.ends, fused,
                                 np.ones(fused.shape[0]), offs, cfg)
    return dets


def ideal_detections(ds, cfg: EvalConfig = EvalConfig()) -> list[Detection]:
    """Oracle scorer: each labeled proposal is given its generating ground truth.

    The label comes from the generator, the interval is refined to the
    same-label ground truth it overlaps most, and the score is that tIoU.
    """
    dets = []
    for vid, units in ds.units.items():
        gts = ds.ground_truths.get(vid, [])
        for u in units:
            if u.label is None:
                continue
            same = [g for g in gts if g.label == u.label]
            if not same:
                continue
            ious = [tiou(u.interval, g.interval) for g in same]
            k = int(np.argmax(ious))
            if ious[k] <= 0:
                continue
            dets.append(Detection(vid, same[k].interval, u.label, float(ious[k])))
    return nms(dets, cfg.nms_threshold)


@dataclass
class ExperimentResult:
    model: DetectorModel
    report: TrainReport
    result: EvalResult
    detections: list


def run_experiment(train_ds, test_ds, graph_params: GraphParams = GraphParams(),
                   gcm_cfg: GcmConfig = GcmConfig(), head_cfg: Optional[HeadConfig] = None,
                   train_cfg: TrainConfig = TrainConfig(), eval_cfg: EvalConfig = EvalConfig(),
                   init_scale: float = 1.0, log_fn=None) -> ExperimentResult:
    if head_cfg is None:
        head_cfg = HeadConfig(num_classes=train_ds.num_classes)
    rng = np.random.default_rng([train_cfg.seed, 99])
    embed = None
    if head_cfg.adjacency == "embed_cosine":
        d = train_ds.feature_dim
        embed = (rng.normal(size=(d, d)) / np.sqrt(d), rng.normal(size=(d, d)) / np.sqrt(d))
    tr = prepare_dataset(train_ds, graph_params, head_cfg, embed=embed)
    te = prepare_dataset(test_ds, graph_params, head_cfg, with_targets=False, embed=embed)
    model = DetectorModel(train_ds.feature_dim, gcm_cfg, head_cfg, rng, init_scale)
    report = fit(tr, model, train_cfg, log_fn=log_fn)
    dets = detect(model, te, eval_cfg)
    result = evaluate_map(dets, ground_truth_list(test_ds), eval_cfg)
    return ExperimentResult(model, report, result, dets)


def toy_problem(seed: int = 0, d: int = 4, classes: int = 2):
    """Six units in one video with contextual, surrounding and semantic edges,
    and ground truths that switch on every loss term."""
    from gcmtal.core import ActionUnit, GroundTruthInstance

    rng = np.random.default_rng(seed)
    spans = [(0.0, 10.0), (0.5, 10.5), (1.0, 9.5), (12.0, 20.0), (40.0, 48.0), (60.0, 62.0)]
    units = [ActionUnit(i, "toy", Interval(s, e), rng.normal(size=d), rng.normal(size=d))
             for i, (s, e) in enumerate(spans)]
    gts = [GroundTruthInstance("toy", Interval(0.2, 10.1), 1),
           GroundTruthInstance("toy", Interval(12.5, 19.0), classes)]
    return units, gts


def toy_gradcheck(head_type: str = "two_gcm", adjacency: str = "cosine", training: bool = False,
                  seed: int = 0, eps: float = 1e-5) -> float:
    """Max relative error of the analytic gradient of the full loss against
    central differences, every parameter, on :func:`toy_problem`."""
    from gcmtal.heads import compute_losses, prepare_video
    from gcmtal.numkernel import finite_difference_gradcheck

    units, gts = toy_problem(seed)
    d = units[0].feature.shape[0]
    hc = HeadConfig(num_classes=2, head_type=head_type, adjacency=adjacency, attention_dim=3)
    gp = GraphParams(semantic_l=2)
    batch = prepare_video(units, gp, hc, gts)
    model = DetectorModel(d, GcmConfig(dropout=0.5 if training else 0.0), hc,
                          np.random.default_rng(seed + 1))

    def loss():
        rng = np.random.default_rng([seed, 5]) if training else None
        out, _ = model.forward(batch, training, rng)
        return compute_losses(out, batch.targets).l_total

    model.zero_grad()
    rng = np.random.default_rng([seed, 5]) if training else None
    model.loss_and_grad(batch, training, rng)
    params = model.parameters()
    return finite_difference_gradcheck(loss, [p.value for p in params],
                                       [p.grad.copy() for p in params], eps=eps)


# Training regime of the synthetic benchmark: whole neighborhoods instead of
# sampled ones, so training and testing propagate with the same operator.
BENCHMARK_TRAIN = TrainConfig(sample_neighbors=False)


def benchmark_data(seed: int, train_videos: int = 100, test_videos: int = 50, **overrides):
    from gcmtal.synthdata import SynthConfig, generate

    tr = generate(SynthConfig(seed=seed, videos=train_videos, split="train", **overrides))
    te = generate(SynthConfig(seed=seed, videos=test_videos, split="test", **overrides))
    return tr, te


def benchmark_run(train_ds, test_ds, seed: int, mode: str = "gcn", edge_kinds=None,
                  train_cfg: TrainConfig = BENCHMARK_TRAIN) -> ExperimentResult:
    gp = GraphParams() if edge_kinds is None else GraphParams(edge_kinds=frozenset(edge_kinds))
    tc = TrainConfig(**{**train_cfg.__dict__, "seed": seed})
    return run_experiment(train_ds, test_ds, gp, GcmConfig(mode=mode), train_cfg=tc)
