import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fcis.evaluation import COCO_THRESHOLDS, average_precision, evaluate, match_report
from fcis.geometry import mask_iou
from fcis.pipeline import Detection
from oracles import brute_ap, brute_evaluate


def _mask(size, y0, y1, x0, x1):
    m = np.zeros((size, size), bool)
    m[y0:y1, x0:x1] = True
    return m


def _det(cat, score, mask):
    return Detection(category=cat, score=score, box=np.zeros(4), mask=mask)


def fixture_0833():
    """One category, two gt; detections scored 0.9 (TP), 0.8 (FP), 0.7 (TP)."""
    g0, g1 = _mask(16, 0, 6, 0, 6), _mask(16, 8, 14, 8, 14)
    gt = {0: (np.stack([g0, g1]), np.array([1, 1]))}
    dets = {0: [_det(1, 0.9, g0), _det(1, 0.8, _mask(16, 0, 6, 9, 15)), _det(1, 0.7, g1)]}
    return dets, gt


def exhaustive_labels(dets, gt_masks, threshold):
    """Among all one-to-one assignments, pick the one whose TP pattern is
    lexicographically best in descending-score order."""
    order = sorted(range(len(dets)), key=lambda j: -dets[j].score)
    n_gt = len(gt_masks)
    best = None
    for assign in itertools.product([None] + list(range(n_gt)), repeat=len(dets)):
        used = [a for a in assign if a is not None]
        if len(used) != len(set(used)):
            continue
        ok = True
        for j, a in enumerate(assign):
            if a is not None:
                inter = np.logical_and(dets[j].mask, gt_masks[a]).sum()
                union = np.logical_or(dets[j].mask, gt_masks[a]).sum()
                ok &= union > 0 and inter / union >= threshold
        if not ok:
            continue
        pattern = tuple(assign[j] is not None for j in order)
        if best is None or pattern > best[0]:
            best = (pattern, assign)
    return ["TP" if a is not None else "FP" for a in best[1]]


def test_fixture_ap_0833():
    dets, gt = fixture_0833()
    r = evaluate(dets, gt, thresholds=(0.5,))
    assert r.ap[(1, 0.5)] == pytest.approx(0.8333333, abs=1e-6)
    assert r.ap[(1, 0.5)] == pytest.approx(0.5 * 1.0 + 0.5 * 2 / 3, abs=1e-12)
    assert brute_evaluate(dets, gt, 1, 0.5) == pytest.approx(5 / 6, abs=1e-12)


def test_fixture_match_report_vs_exhaustive():
    dets, gt = fixture_0833()
    rep = match_report(dets, gt, 0.5)
    labels = [rep["detections"][(0, j)] for j in range(3)]
    assert labels == ["TP", "FP", "TP"]
    assert labels == exhaustive_labels(dets[0], gt[0][0], 0.5)
    assert rep["gt"] == {(0, 0): True, (0, 1): True}


def test_perfect_and_empty():
    g = np.stack([_mask(12, 0, 5, 0, 5), _mask(12, 6, 12, 6, 12)])
    gt = {0: (g, np.array([1, 2])), 1: (g[:1], np.array([2]))}
    perfect = {0: [_det(1, 1.0, g[0]), _det(2, 1.0, g[1])], 1: [_det(2, 1.0, g[0])]}
    r = evaluate(perfect, gt)
    assert all(v == 1.0 for v in r.ap.values())
    assert r.map50 == r.map70 == r.map_coco == 1.0
    r = evaluate({}, gt)
    assert all(v == 0.0 for v in r.ap.values())
    assert r.num_detections == 0 and r.num_gt == {1: 1, 2: 2}


def test_duplicate_detection_is_fp():
    g = _mask(10, 2, 8, 2, 8)
    gt = {0: (g[None], np.array([1]))}
    rep = match_report({0: [_det(1, 0.6, g), _det(1, 0.9, g)]}, gt, 0.5)
    assert rep["detections"] == {(0, 1): "TP", (0, 0): "FP"}
    single = match_report({0: [_det(1, 0.5, g)]}, gt, 0.5)
    assert single["detections"] == {(0, 0): "TP"}


def test_unknown_image_rejected():
    with pytest.raises(KeyError):
        evaluate({5: [_det(1, 0.5, np.zeros((4, 4), bool))]}, {0: (np.zeros((0, 4, 4), bool), np.zeros(0))})


def test_ties_broken_by_image_then_index():
    g = _mask(8, 0, 4, 0, 4)
    gt = {0: (g[None], np.array([1])), 1: (g[None], np.array([1]))}
    miss = _mask(8, 5, 8, 5, 8)
    dets = {1: [_det(1, 0.5, g)], 0: [_det(1, 0.5, miss), _det(1, 0.5, g)]}
    # order: (0,0) FP, (0,1) TP, (1,0) TP
    r = evaluate(dets, gt, thresholds=(0.5,))
    assert r.ap[(1, 0.5)] == pytest.approx(brute_ap([False, True, True], 2))


def test_category_without_gt_excluded_from_mean():
    g = _mask(8, 0, 4, 0, 4)
    gt = {0: (g[None], np.array([1]))}
    r = evaluate({0: [_det(1, 0.9, g), _det(3, 0.8, g)]}, gt)
    assert r.categories == [1]
    assert r.map50 == 1.0


def test_table_and_csv_format():
    dets, gt = fixture_0833()
    r = evaluate(dets, gt, thresholds=(0.5, 0.7))
    assert "mAP^r@0.5 = 0.8333" in r.table()
    lines = r.csv().splitlines()
    assert lines[0] == "category,threshold,ap"
    assert lines[1] == "1,0.5,0.833333"


def test_average_precision_edge_cases():
    assert average_precision([], 3) == 0.0
    assert average_precision([True], 0) == 0.0
    assert average_precision([True, True], 2) == 1.0
    assert average_precision([False, True], 1) == 0.5


def random_instance(seed, size=10):
    r = np.random.default_rng(seed)
    n_img = int(r.integers(1, 4))
    gt, dets = {}, {}
    for i in range(n_img):
        n_gt = int(r.integers(0, 4))
        masks = np.zeros((n_gt, size, size), bool)
        for g in range(n_gt):
            y, x = r.integers(0, size - 3, size=2)
            h, w = r.integers(2, 6, size=2)
            masks[g, y:y + h, x:x + w] = True
        gt[i] = (masks, r.integers(1, 3, size=n_gt))
    total = int(r.integers(0, 11))
    for _ in range(total):
        i = int(r.integers(n_img))
        masks, _ = gt[i]
        if len(masks) and r.random() < 0.7:
            m = masks[r.integers(len(masks))].copy()
            m ^= r.random((size, size)) < 0.08  # perturbed copy
        else:
            m = r.random((size, size)) < 0.2
        score = float(np.round(r.random(), 1))  # coarse scores create ties
        dets.setdefault(i, []).append(_det(int(r.integers(1, 3)), score, m))
    return dets, gt


def test_evaluate_matches_brute_force_on_random_instances():
    for seed in range(150):
        dets, gt = random_instance(seed)
        r = evaluate(dets, gt, thresholds=(0.5, 0.7), categories=[1, 2])
        for c in (1, 2):
            for t in (0.5, 0.7):
                assert r.ap[(c, t)] == pytest.approx(brute_evaluate(dets, gt, c, t), abs=1e-12), (seed, c, t)


@settings(max_examples=100)
@given(flags=st.lists(st.booleans(), max_size=12), extra=st.integers(0, 3))
def test_ap_matches_envelope_oracle(flags, extra):
    num_gt = sum(flags) + extra
    assert average_precision(flags, num_gt) == pytest.approx(brute_ap(flags, num_gt), abs=1e-12)


@settings(max_examples=60)
@given(seed=st.integers(0, 10_000))
def test_ap_monotone_transform_invariance(seed):
    dets, gt = random_instance(seed)
    base = evaluate(dets, gt, thresholds=(0.5,), categories=[1, 2])
    warped = {i: [_det(d.category, d.score ** 3 * 0.5 + 0.1, d.mask) for d in ds] for i, ds in dets.items()}
    assert evaluate(warped, gt, thresholds=(0.5,), categories=[1, 2]).ap == base.ap


@settings(max_examples=60)
@given(seed=st.integers(0, 10_000))
def test_low_fp_and_tp_removal_never_help(seed):
    dets, gt = random_instance(seed)
    base = evaluate(dets, gt, thresholds=(0.5,), categories=[1, 2])
    if not gt:
        return
    img = next(iter(gt))
    junk = np.zeros(gt[img][0].shape[1:] if len(gt[img][0]) else (10, 10), bool)
    junk[0, 0] = True
    worse = {i: list(ds) for i, ds in dets.items()}
    worse.setdefault(img, []).append(_det(1, -1.0, junk))
    r = evaluate(worse, gt, thresholds=(0.5,), categories=[1, 2])
    assert r.ap[(1, 0.5)] <= base.ap[(1, 0.5)] + 1e-12
    # a removed TP must not free its gt for a lower-scored duplicate, or
    # greedy re-matching can legitimately raise AP
    rep = match_report(dets, gt, 0.5, categories=[1, 2])
    for (i, j), v in rep["detections"].items():
        if v != "TP":
            continue
        cat = dets[i][j].category
        masks, labels = gt[i]
        rivals = [d for jj, d in enumerate(dets[i]) if jj != j and d.category == cat]
        contested = any(mask_iou(d.mask, masks[g]) >= 0.5 for d in rivals for g in range(len(labels)) if labels[g] == cat)
        if contested:
            continue
        fewer = {ii: [d for jj, d in enumerate(ds) if (ii, jj) != (i, j)] for ii, ds in dets.items()}
        r = evaluate(fewer, gt, thresholds=(0.5,), categories=[1, 2])
        assert r.ap[(cat, 0.5)] <= base.ap[(cat, 0.5)] + 1e-12


@settings(max_examples=100)
@given(flags=st.lists(st.booleans(), min_size=1, max_size=12), extra=st.integers(0, 3), data=st.data())
def test_dropping_a_true_positive_flag_never_helps(flags, extra, data):
    tps = [i for i, f in enumerate(flags) if f]
    if not tps:
        return
    drop = data.draw(st.sampled_from(tps))
    num_gt = sum(flags) + extra
    assert average_precision(flags[:drop] + flags[drop + 1:], num_gt) <= average_precision(flags, num_gt) + 1e-12


def test_greedy_rematch_counterexample():
    # removing the 0.9 TP lets its duplicate at 0.8 take over the gt
    g0, g1 = _mask(12, 0, 5, 0, 5), _mask(12, 6, 12, 6, 12)
    gt = {0: (np.stack([g0, g1]), np.array([1, 1]))}
    miss = _mask(12, 0, 2, 8, 12)
    dets = [_det(1, 0.9, g0), _det(1, 0.8, g0), _det(1, 0.7, miss), _det(1, 0.6, g1)]
    full = evaluate({0: dets}, gt, thresholds=(0.5,)).ap[(1, 0.5)]
    fewer = evaluate({0: dets[1:]}, gt, thresholds=(0.5,)).ap[(1, 0.5)]
    assert full == pytest.approx(0.75) and fewer == pytest.approx(5 / 6)


@settings(max_examples=40)
@given(seed=st.integers(0, 10_000))
def test_coco_map_below_map50(seed):
    dets, gt = random_instance(seed)
    r = evaluate(dets, gt)
    assert r.map_coco <= r.map50 + 1e-12
    assert all(0.0 <= v <= 1.0 for v in r.ap.values())
    assert len(COCO_THRESHOLDS) == 10
