import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_units
from gcmtal.core import ActionUnit, GroundTruthInstance, Interval, ValidationError
from gcmtal.gcm import GcmConfig, GcmWeights
from gcmtal.graphbuild import CONTEXTUAL, GraphParams, build_graph
from gcmtal.heads import (
    DetectorModel,
    HeadConfig,
    HeadOutputs,
    Targets,
    assign_targets,
    compute_losses,
    concat_batches,
    decode_offsets,
    decode_offsets_array,
    encode_offsets,
    extend_interval,
    hinge,
    loss_gradients,
    one_stage_enhance,
    one_stage_enhance_multiscale,
    prepare_video,
    single_gcm_head,
    smooth_l1,
    two_gcm_heads,
)
from gcmtal.numkernel import finite_difference_gradcheck
from gcmtal.pipeline import toy_gradcheck, toy_problem


def test_extend_interval():
    assert extend_interval(Interval(10, 20)) == Interval(5, 25)
    assert extend_interval(Interval(1, 5)) == Interval(0, 7)


def test_offsets_known_values():
    oc, ol = encode_offsets(Interval(0, 10), Interval(2, 10))
    assert oc == pytest.approx(-0.1)
    assert ol == pytest.approx(math.log(10 / 8))
    g = decode_offsets(Interval(0, 10), (oc, ol))
    assert g.start == pytest.approx(2) and g.end == pytest.approx(10)


@settings(max_examples=300)
@given(st.floats(0, 1000), st.floats(0.01, 100), st.floats(0, 1000), st.floats(0.01, 100))
def test_offsets_roundtrip(us, ul, gs, gl):
    u, g = Interval(us, us + ul), Interval(gs, gs + gl)
    back = decode_offsets(u, encode_offsets(u, g))
    assert back.start == pytest.approx(g.start, abs=1e-9)
    assert back.end == pytest.approx(g.end, abs=1e-9)
    s, e = decode_offsets_array(np.array([u.start]), np.array([u.end]),
                                np.array([encode_offsets(u, g)]))
    assert s[0] == pytest.approx(g.start, abs=1e-9) and e[0] == pytest.approx(g.end, abs=1e-9)


def _u(i, s, e):
    return ActionUnit(i, "v", Interval(s, e), np.ones(2))


def test_assign_targets_thresholds_and_closest():
    gts = [GroundTruthInstance("v", Interval(0, 10), 2),
           GroundTruthInstance("v", Interval(20, 30), 3)]
    units = [_u(0, 0, 10),     # tIoU 1 -> complete
             _u(1, 0, 5),      # tIoU exactly 0.5 -> foreground, incomplete
             _u(2, 0, 7),      # tIoU 0.7 -> complete (inclusive)
             _u(3, 12, 18),    # background
             _u(4, 22, 30)]    # 0.8 with the second gt
    t = assign_targets(units, gts)
    assert t.label.tolist() == [2, 2, 2, 0, 3]
    assert t.completeness_label.tolist() == [1, 0, 1, 0, 1]
    assert t.com_mask.tolist() == [True, True, True, False, True]
    assert t.reg_mask.tolist() == [True, False, True, False, True]
    np.testing.assert_allclose(t.offset_target[4], encode_offsets(Interval(22, 30), Interval(20, 30)))


def test_assign_targets_tie_breaks_on_center():
    gts = [GroundTruthInstance("v", Interval(0, 4), 1), GroundTruthInstance("v", Interval(6, 10), 2)]
    # tIoU 0 with both; the second gt's center is nearer
    t = assign_targets([_u(0, 4.5, 9.5)], gts)
    np.testing.assert_allclose(t.offset_target[0], encode_offsets(Interval(4.5, 9.5), Interval(6, 10)))


def test_smooth_l1_and_hinge_values():
    np.testing.assert_allclose(smooth_l1(np.array([0.5, -2.0, 1.0])), [0.125, 1.5, 0.5])
    np.testing.assert_allclose(hinge(np.array([1, 0, 1]), np.array([0.3, 0.3, 2.0])), [0.7, 1.3, 0.0])


def _outputs_and_targets():
    logits = np.array([[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 3.0]])
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    out = HeadOutputs(p, np.array([0.5, -0.2, 1.5]),
                      np.array([[0.1, 0.2, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 2.0, -0.5]]),
                      logits, True)
    tgt = Targets(np.array([0, 1, 2]), np.array([0, 0, 1]),
                  np.array([[0.0, 0.0], [0.3, 0.1], [0.5, 0.0]]),
                  np.array([False, False, True]), np.array([False, True, True]))
    return out, tgt


def test_compute_losses_hand_values():
    out, tgt = _outputs_and_targets()
    L = compute_losses(out, tgt, 0.5, 0.5)
    e = math.e
    l_cls = -(math.log(e**2 / (e**2 + 2)) + math.log(e / (e + 2)) + math.log(e**3 / (e**3 + 2))) / 3
    l_com = ((1 - (-1) * -0.2) + max(0, 1 - 1.5)) / 2     # only com_mask rows
    l_reg = (1.5 - 0.5) + 0.5 * 0.25                      # smooth-L1 of (1.5, -0.5)
    assert L.l_cls == pytest.approx(l_cls, rel=1e-12)
    assert L.l_com == pytest.approx(l_com, rel=1e-12)
    assert L.l_reg == pytest.approx(l_reg, rel=1e-12)
    assert L.l_total == pytest.approx(l_cls + 0.5 * l_com + 0.5 * l_reg, rel=1e-12)


def test_loss_gradients_match_finite_differences():
    out, tgt = _outputs_and_targets()
    logits, com, off = out.logits.copy(), out.completeness.copy(), out.offsets.copy()

    def f():
        p = np.exp(logits - logits.max(1, keepdims=True))
        o = HeadOutputs(p / p.sum(1, keepdims=True), com, off, logits, True)
        return compute_losses(o, tgt, 0.5, 0.5).l_total

    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    g = loss_gradients(HeadOutputs(p, com, off, logits, True), tgt, 0.5, 0.5)
    assert finite_difference_gradcheck(f, [logits, com, off], list(g)) < 1e-6


@pytest.mark.parametrize("head", ["two_gcm", "single_gcm"])
@pytest.mark.parametrize("adjacency", ["cosine", "attention"])
@pytest.mark.parametrize("training", [False, True])
def test_full_model_gradcheck(head, adjacency, training):
    assert toy_gradcheck(head, adjacency, training) < 1e-5


def _toy_batch(head_type="two_gcm", adjacency="cosine"):
    units, gts = toy_problem()
    hc = HeadConfig(num_classes=2, head_type=head_type, adjacency=adjacency)
    model = DetectorModel(4, GcmConfig(), hc, np.random.default_rng(0))
    return model, prepare_video(units, GraphParams(semantic_l=2), hc, gts)


def test_functional_heads_match_model():
    model, b = _toy_batch()
    a = model.predict(b)
    f = two_gcm_heads(b.features, b.extended, b.adjacency, model)
    np.testing.assert_allclose(a.class_probs, f.class_probs)
    np.testing.assert_allclose(a.completeness, f.completeness)
    np.testing.assert_allclose(a.offsets, f.offsets)
    with pytest.raises(ValidationError):
        two_gcm_heads(b.features, None, b.adjacency, model)
    model, b = _toy_batch("single_gcm")
    s = single_gcm_head(b.features, b.adjacency, model)
    assert not s.has_completeness and np.all(s.completeness == 1.0)
    np.testing.assert_allclose(model.predict(b).class_probs, s.class_probs)
    out, _ = model.forward(b)
    assert compute_losses(out, b.targets).l_com == 0.0


def test_block_diagonal_batch_equals_separate_videos():
    rng = np.random.default_rng(3)
    hc = HeadConfig(num_classes=3)
    model = DetectorModel(8, GcmConfig(), hc, rng)
    batches = []
    for v in range(3):
        units = [ActionUnit(u.id, f"v{v}", u.interval, u.feature, u.feature * 0.5)
                 for u in random_units(rng, 15)]
        batches.append(prepare_video(units, GraphParams(), hc, []))
    joint = model.predict(concat_batches(batches))
    sep = np.concatenate([model.predict(b).class_probs for b in batches])
    np.testing.assert_allclose(joint.class_probs, sep, atol=1e-12)


def test_one_stage_enhance():
    rng = np.random.default_rng(4)
    F = rng.normal(size=(20, 6))
    cfg = GcmConfig()
    w = GcmWeights.init(cfg, 6, rng)
    out = one_stage_enhance(F, w, cfg)
    assert out.shape == F.shape
    units = [ActionUnit(t, "m", Interval(t, t + 1), F[t]) for t in range(20)]
    g = build_graph(units, GraphParams(one_stage_mode=True))
    assert not g.edges_of_kind(CONTEXTUAL)
    # forcing one-stage mode: the same result when the caller forgets the flag
    np.testing.assert_array_equal(out, one_stage_enhance(F, w, cfg, GraphParams()))
    outs = one_stage_enhance_multiscale([F, F[::2]], [w, w], cfg)
    assert [o.shape for o in outs] == [(20, 6), (10, 6)]
    with pytest.raises(ValueError):
        one_stage_enhance(np.zeros((0, 6)), w, cfg)


def test_head_config_validation():
    with pytest.raises(ValueError):
        HeadConfig(head_type="three")
    with pytest.raises(ValueError):
        HeadConfig(adjacency="dot")
