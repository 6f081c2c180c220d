import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fcis import tensor as T
from fcis.assemble import project_rois
from fcis.head import (
    RoiOutput,
    RoiTarget,
    assign_roi_labels,
    batch_losses,
    fuse,
    head_forward,
    match_rois,
    mask_target_pixels,
    ohem_select,
    roi_losses,
    sample_rois,
)
from fcis.tensor import Tensor
from oracles import directional_check, random_boxes


def _assembled(inside, outside):
    return np.stack([np.asarray(inside, float), np.asarray(outside, float)])


# ---------------------------------------------------------------- fusion


def test_equal_scores_give_half():
    a = np.random.default_rng(0).normal(size=(3, 4, 5))
    out = fuse(_assembled(a, a))
    np.testing.assert_allclose(out.seg_probs, 0.5, atol=1e-15)


def test_ln3_gives_three_quarters():
    out = fuse(_assembled(np.full((2, 1, 1), math.log(3)), np.zeros((2, 1, 1))))
    np.testing.assert_allclose(out.seg_probs, 0.75, atol=1e-15)


def test_class_probs_closed_form():
    # C = 2; category 1 has max-scores 1 everywhere, the others 0
    inside = np.zeros((3, 4, 4))
    inside[1] = 1.0
    outside = np.zeros((3, 4, 4))
    outside[1] = -2.0
    out = fuse(_assembled(inside, outside))
    e = math.e
    expect = np.array([1, e, 1]) / (e + 2)
    np.testing.assert_allclose(out.class_probs, expect, atol=1e-12)
    np.testing.assert_allclose(out.class_probs[[1, 2, 0]], [0.5761, 0.2119, 0.2119], atol=5e-5)


def test_case_logic_fixture():
    # inside-object, outside-object-in-box, outside-box
    inside = np.array([5.0, 0.0, -5.0]).reshape(3, 1, 1)
    outside = np.array([0.0, 5.0, -5.0]).reshape(3, 1, 1)
    out = fuse(_assembled(inside, outside))
    np.testing.assert_allclose(out.seg_probs[:, 0, 0], [0.9933, 0.0067, 0.5], atol=5e-5)
    # pooled max 5, 5 and -5: the two in-box cases score high, the third low
    logits = np.log(out.class_probs)
    np.testing.assert_allclose(logits - logits[0], [0, 0, -10], atol=1e-12)


def test_case_logic_symmetric_extremes():
    out = fuse(_assembled(np.array([5.0, -5.0]).reshape(2, 1, 1), np.array([-5.0, 5.0]).reshape(2, 1, 1)))
    np.testing.assert_allclose(out.seg_probs[:, 0, 0], [1 / (1 + math.exp(-10)), 1 / (1 + math.exp(10))])


def random_assembled(seed):
    r = np.random.default_rng(seed)
    c1 = int(r.integers(2, 6))
    rh, rw = (int(v) for v in r.integers(1, 8, size=2))
    return r.normal(scale=3.0, size=(2, c1, rh, rw))


def test_fusion_properties_1000_random():
    for seed in range(1000):
        a = random_assembled(seed)
        out = fuse(a)
        assert abs(out.class_probs.sum() - 1.0) <= 1e-6
        assert np.all(out.class_probs >= 0)
        assert np.all((out.seg_probs >= 0) & (out.seg_probs <= 1))
        flipped = fuse(a[::-1])
        np.testing.assert_allclose(out.seg_probs + flipped.seg_probs, 1.0, atol=1e-12)
        # raising one inside score raises that pixel's probability and never lowers pooling
        r = np.random.default_rng(seed + 5000)
        c = int(r.integers(a.shape[1]))
        y, x = int(r.integers(a.shape[2])), int(r.integers(a.shape[3]))
        b = a.copy()
        b[0, c, y, x] += float(r.uniform(0.1, 2.0))
        up = fuse(b)
        assert up.seg_probs[c, y, x] > out.seg_probs[c, y, x]
        pooled_a = np.maximum(a[0], a[1]).mean(axis=(1, 2))
        pooled_b = np.maximum(b[0], b[1]).mean(axis=(1, 2))
        assert pooled_b[c] >= pooled_a[c]
        assert up.class_probs[c] >= out.class_probs[c] - 1e-12


@settings(max_examples=50)
@given(seed=st.integers(0, 10_000), shift=st.floats(-20, 20))
def test_class_probs_shift_invariant(seed, shift):
    a = random_assembled(seed)
    np.testing.assert_allclose(fuse(a + shift).class_probs, fuse(a).class_probs, atol=1e-9)


@settings(max_examples=50)
@given(seed=st.integers(0, 10_000), s=st.floats(0.1, 10))
def test_argmax_invariant_to_common_rescale(seed, s):
    a = random_assembled(seed)
    pooled = np.maximum(a[0], a[1]).mean(axis=(1, 2))
    out = fuse(a)
    assert np.argmax(out.class_probs) == np.argmax(pooled)
    assert np.argmax(np.exp(s * pooled)) == np.argmax(out.class_probs)


def test_separate_mode_segmentation_and_vote():
    k = 2
    inside = np.zeros((2, 4, 4))
    inside[1] = 2.0
    outside = np.zeros((2, 4, 4))
    outside[1, :2, :2] = 4.0  # only the top-left cell votes
    out = fuse(_assembled(inside, outside), mode="separate", k=k)
    np.testing.assert_allclose(out.seg_probs[1], 1 / (1 + math.exp(-2.0)), atol=1e-12)
    # cell means (4, 0, 0, 0) average to 1 for category 1
    np.testing.assert_allclose(out.class_probs, [1 / (1 + math.e), math.e / (1 + math.e)], atol=1e-12)


# ---------------------------------------------------------------- losses


def test_uniform_class_probs_log3():
    out = RoiOutput(class_probs=np.full(3, 1 / 3), seg_probs=np.full((3, 2, 2), 0.5))
    l_det, l_seg, l_bbox, total = roi_losses(out, RoiTarget(0, None, np.zeros(4)))
    assert l_det == pytest.approx(math.log(3), abs=1e-12)
    assert l_seg == 0 and l_bbox == 0 and total == l_det


@pytest.mark.parametrize("fill", [0.0, 0.3, 1.0])
def test_half_seg_probs_log2(fill):
    rng = np.random.default_rng(0)
    mask = rng.random((5, 7)) < fill
    out = RoiOutput(class_probs=np.array([0.5, 0.5]), seg_probs=np.full((2, 5, 7), 0.5))
    _, l_seg, _, _ = roi_losses(out, RoiTarget(1, mask, np.zeros(4)))
    assert l_seg == pytest.approx(math.log(2), abs=1e-12)


def test_near_perfect_prediction_small_loss():
    eps = 1e-7
    mask = np.zeros((4, 4), bool)
    mask[1:3] = True
    seg = np.where(mask, 1 - eps, eps)[None].repeat(2, axis=0)
    out = RoiOutput(class_probs=np.array([eps, 1 - eps]), seg_probs=seg, bbox_deltas=np.zeros(4))
    *_, total = roi_losses(out, RoiTarget(1, mask, np.zeros(4)))
    assert total < 1e-6


def test_smooth_l1_transition():
    out = RoiOutput(class_probs=np.array([0.5, 0.5]), seg_probs=np.full((2, 1, 1), 0.5),
                    bbox_deltas=np.array([0.5, -2.0, 0.0, 1.0]))
    _, _, l_bbox, _ = roi_losses(out, RoiTarget(1, np.ones((1, 1), bool), np.zeros(4)))
    assert l_bbox == pytest.approx(0.125 + 1.5 + 0 + 0.5)


def test_positive_without_mask_fails():
    out = RoiOutput(class_probs=np.array([0.5, 0.5]), seg_probs=np.full((2, 1, 1), 0.5))
    with pytest.raises(ValueError, match="mask"):
        roi_losses(out, RoiTarget(1, None, np.zeros(4)))


def _head_case(seed, mode="joint", dtype=np.float64):
    r = np.random.default_rng(seed)
    k = 1 if mode == "translation_invariant" else int(r.integers(1, 4))
    C, h, w, stride = 2, 6, 7, 8
    ps = r.normal(size=(2 * k * k * (C + 1), h, w))
    bb = r.normal(scale=0.3, size=(4 * k * k, h, w))
    gt_boxes = random_boxes(r, 2, 48)
    gt_masks = np.zeros((2, 48, 56), bool)
    for i, (x1, y1, x2, y2) in enumerate(gt_boxes.astype(int)):
        gt_masks[i, y1:y2 + 1, x1:x2 + 1] = True
    gt_labels = np.array([1, 2])
    rois = np.concatenate([gt_boxes + r.normal(scale=1.0, size=(2, 4)), random_boxes(r, 4, 48)])
    rois[:, 2:] = np.maximum(rois[:, 2:], rois[:, :2] + 1)
    batch = project_rois(rois, stride, k, (h, w))
    labels, gi, _, targets = match_rois(rois, gt_boxes, gt_labels)
    labels[:2] = gt_labels  # guarantee positives
    gi[:2] = [0, 1]
    fg = mask_target_pixels(batch, rois, gi, gt_masks, stride)
    return ps, bb, batch, labels, fg, targets, C


@pytest.mark.parametrize("mode", ["joint", "separate", "translation_invariant"])
def test_total_loss_finite_difference(mode):
    for seed in range(20):
        ps, bb, batch, labels, fg, targets, C = _head_case(seed, mode)

        def f(ts):
            fwd = head_forward(ts[0], ts[1], batch, C, mode)
            l_det, l_seg, l_bbox = batch_losses(fwd, labels, fg, targets)
            return T.total(T.add(T.add(l_det, l_seg), l_bbox))

        err, _, _ = directional_check(f, [ps, bb], seed=seed)
        assert err < 1e-4, (mode, seed, err)


def test_batch_losses_match_per_roi_oracle():
    ps, bb, batch, labels, fg, targets, C = _head_case(3)
    fwd = head_forward(Tensor(ps), Tensor(bb), batch, C)
    l_det, l_seg, l_bbox = batch_losses(fwd, labels, fg, targets)
    seg = fwd.seg_probs()
    offs = batch.offsets()
    for r, g in enumerate(batch.grids):
        out = RoiOutput(class_probs=fwd.class_probs()[:, r],
                        seg_probs=seg[:, offs[r]:offs[r + 1]].reshape(-1, g.height, g.width),
                        bbox_deltas=fwd.bbox_deltas.numpy()[:, r])
        mask = fg[offs[r]:offs[r + 1]].reshape(g.height, g.width) if labels[r] else None
        want = roi_losses(out, RoiTarget(int(labels[r]), mask, targets[r]))
        got = (l_det.numpy()[r], l_seg.numpy()[r], l_bbox.numpy()[r])
        np.testing.assert_allclose(got, want[:3], atol=1e-10)


# ---------------------------------------------------------------- OHEM / sampling


def test_ohem_examples():
    assert set(ohem_select([3, 1, 2], 2).tolist()) == {0, 2}
    assert sorted(ohem_select([1.0, 2.0], 5).tolist()) == [0, 1]
    assert ohem_select([1, 1, 1, 1], 2).tolist() == [0, 1]  # ties to lower index


def test_ohem_300_choose_128(rng):
    losses = rng.exponential(size=300)
    losses[rng.integers(300, size=30)] = 1.0  # ties
    sel = ohem_select(losses, 128)
    assert len(sel) == 128 == len(set(sel.tolist()))
    rest = np.setdiff1d(np.arange(300), sel)
    assert losses[sel].min() >= losses[rest].max()


@given(seed=st.integers(0, 10_000), n=st.integers(1, 40))
def test_ohem_matches_sort_oracle(seed, n):
    losses = np.random.default_rng(seed).integers(0, 5, size=30).astype(float)
    want = sorted(range(30), key=lambda i: (-losses[i], i))[:n]
    assert ohem_select(losses, n).tolist() == want


def test_sample_rois_caps_positives(rng):
    labels = np.where(rng.random(300) < 0.5, 1, 0)
    pick = sample_rois(labels, rng, 128)
    assert len(pick) == 128 == len(np.unique(pick))
    assert (labels[pick] > 0).sum() <= 32
    few = np.array([1] * 3 + [0] * 10)
    assert len(sample_rois(few, rng, 128)) == 13


# ---------------------------------------------------------------- assignment


def _assign(rois, gt_boxes, labels=(1,), size=32):
    masks = np.zeros((len(gt_boxes), size, size), bool)
    for i, (x1, y1, x2, y2) in enumerate(np.asarray(gt_boxes, int)):
        masks[i, y1:y2, x1:x2] = True
    return assign_roi_labels(rois, gt_boxes, np.array(labels), masks, 8, 2, (size // 8, size // 8))


def test_assign_identity_match():
    (t,) = _assign([[0, 0, 16, 16]], [[0, 0, 16, 16]])
    assert t.label == 1
    np.testing.assert_array_equal(t.bbox_target, 0)
    assert t.mask.shape == (2, 2) and t.mask.all()


def test_assign_disjoint_negative():
    (t,) = _assign([[16, 16, 32, 32]], [[0, 0, 8, 8]])
    assert t.label == 0 and t.mask is None


def test_assign_iou_exactly_half_is_negative():
    (t,) = _assign([[0, 0, 16, 8]], [[0, 0, 16, 16]])
    assert t.iou == 0.5 and t.label == 0
    (t,) = _assign([[0, 0, 16, 8.01]], [[0, 0, 16, 16]])
    assert t.label == 1


def test_assign_picks_best_gt_and_category():
    ts = _assign([[0, 0, 15, 15], [17, 17, 32, 32]], [[0, 0, 16, 16], [16, 16, 32, 32]], labels=(3, 2))
    assert [t.label for t in ts] == [3, 2]
    assert [t.gt_index for t in ts] == [0, 1]


def test_assign_without_gt():
    ts = assign_roi_labels([[0, 0, 8, 8]], np.zeros((0, 4)), np.zeros(0, int), np.zeros((0, 16, 16), bool),
                           8, 3, (2, 2))
    assert ts[0].label == 0 and ts[0].gt_index == -1


def test_mask_target_nearest_neighbour():
    # gt occupies the left half of a 32x32 box; stride 8 samples centers at 4, 12, 20, 28
    mask = np.zeros((1, 32, 32), bool)
    mask[0, :, :13] = True
    (t,) = assign_roi_labels([[0, 0, 32, 32]], [[0, 0, 32, 32]], np.array([1]), mask, 8, 2, (4, 4))
    np.testing.assert_array_equal(t.mask, np.tile([True, True, False, False], (4, 1)))


def test_mask_target_outside_box_is_background():
    mask = np.ones((1, 32, 32), bool)
    (t,) = assign_roi_labels([[0, 0, 14, 30]], [[0, 0, 14, 32]], np.array([1]), mask, 8, 1, (4, 4))
    # span covers map columns 0..1; column 1 center (x = 12) is inside, row 3 center (y = 28) inside
    assert t.mask.shape == (4, 2)
    assert t.mask.all()
    (t,) = assign_roi_labels([[0, 0, 11, 30]], [[0, 0, 12, 32]], np.array([1]), mask, 8, 1, (4, 4))
    np.testing.assert_array_equal(t.mask[:, 1], False)  # center x = 12 lies beyond x2 = 11
