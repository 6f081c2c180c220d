"""Mask-level mean average precision (mAP^r)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import mask_iou_matrix

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2).tolist())


@dataclass
class EvalResult:
    ap: dict  # (category, threshold) -> AP
    categories: list
    thresholds: tuple
    num_detections: int = 0
    num_gt: dict = field(default_factory=dict)

    def map_at(self, thr: float) -> float:
        vals = [self.ap[(c, thr)] for c in self.categories if (c, thr) in self.ap]
        return float(np.mean(vals)) if vals else 0.0

    @property
    def map50(self) -> float:
        return self.map_at(0.5)

    @property
    def map70(self) -> float:
        return self.map_at(0.7)

    @property
    def map_coco(self) -> float:
        return float(np.mean([self.map_at(t) for t in COCO_THRESHOLDS]))

    def table(self) -> str:
        lines = ["category  " + "  ".join(f"{t:>5.2f}" for t in self.thresholds)]
        for c in self.categories:
            lines.append(f"{c:>8d}  " + "  ".join(f"{self.ap[(c, t)]:>5.3f}" for t in self.thresholds))
        lines.append(f"mAP^r@0.5 = {self.map50:.4f}")
        lines.append(f"mAP^r@0.7 = {self.map70:.4f}")
        lines.append(f"mAP^r@[0.5:0.95] = {self.map_coco:.4f}")
        return "\n".join(lines)

    def csv(self) -> str:
        rows = ["category,threshold,ap"]
        for c in self.categories:
            for t in self.thresholds:
                rows.append(f"{c},{t:g},{self.ap[(c, t)]:.6f}")
        return "\n".join(rows) + "\n"


def average_precision(tp, num_gt: int) -> float:
    """All-points interpolated AP from TP flags in descending-score order."""
    if num_gt == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, tp.size + 1)
    # precision envelope: max precision at any recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * env))


def _ordered(detections: dict, category: int):
    items = []
    for image_id in sorted(detections):
        for j, d in enumerate(detections[image_id]):
            if d.category == category:
                items.append((-d.score, image_id, j, d))
    items.sort(key=lambda t: t[:3])
    return [(t[1], t[2], t[3]) for t in items]


def _gt_of(gt, image_id, category):
    masks, labels = gt[image_id]
    idx = np.flatnonzero(np.asarray(labels) == category)
    return np.asarray(masks)[idx] if len(idx) else np.zeros((0,) + np.asarray(masks).shape[1:], bool), idx


def _check_ids(detections: dict, gt: dict) -> None:
    unknown = set(detections) - set(gt)
    if unknown:
        raise KeyError(f"detections reference unknown image id(s): {sorted(unknown)}")


def match_category(detections: dict, gt: dict, category: int, threshold: float):
    """Greedy matching for one category.

    Returns ``(order, tp_flags, matched)`` where ``order`` lists (image_id,
    det index) by descending score and ``matched`` maps image_id to a bool
    array over that image's gt instances of this category.
    """
    _check_ids(detections, gt)
    order = _ordered(detections, category)
    matched = {i: np.zeros(len(_gt_of(gt, i, category)[1]), dtype=bool) for i in gt}
    iou_cache = {}
    tp = np.zeros(len(order), dtype=bool)
    for n, (image_id, j, d) in enumerate(order):
        gmasks, _ = _gt_of(gt, image_id, category)
        if len(gmasks) == 0:
            continue
        key = (image_id, j)
        if key not in iou_cache:
            iou_cache[key] = mask_iou_matrix(d.mask[None], gmasks)[0]
        ious = np.where(matched[image_id], -1.0, iou_cache[key])
        best = int(np.argmax(ious))
        if ious[best] >= threshold:
            matched[image_id][best] = True
            tp[n] = True
    return [(i, j) for i, j, _ in order], tp, matched


def match_report(detections: dict, gt: dict, threshold: float, categories=None) -> dict:
    """Per-detection TP/FP labels and per-gt matched flags.

    Returns ``{"detections": {(image_id, j): "TP"|"FP"}, "gt": {(image_id, g): bool}}``.
    """
    if categories is None:
        cats = set()
        for masks, labels in gt.values():
            cats.update(int(c) for c in labels)
        for dets in detections.values():
            cats.update(d.category for d in dets)
        categories = sorted(cats)
    _check_ids(detections, gt)
    det_labels, gt_flags = {}, {}
    for image_id, (_, labels) in gt.items():
        for g in range(len(labels)):
            gt_flags[(image_id, g)] = False
    for c in categories:
        order, tp, matched = match_category(detections, gt, c, threshold)
        for key, t in zip(order, tp):
            det_labels[key] = "TP" if t else "FP"
        for image_id, flags in matched.items():
            _, idx = _gt_of(gt, image_id, c)
            for g, f in zip(idx, flags):
                gt_flags[(image_id, int(g))] = bool(f)
    return {"detections": det_labels, "gt": gt_flags}


def evaluate(detections: dict, gt: dict, thresholds=(0.5, 0.7) + COCO_THRESHOLDS, categories=None) -> EvalResult:
    """mAP^r over categories that have at least one gt instance.

    ``detections``: image_id -> list of Detection. ``gt``: image_id ->
    (masks[N, H, W], labels[N]).
    """
    _check_ids(detections, gt)
    thresholds = tuple(sorted(set(round(float(t), 4) for t in thresholds)))
    num_gt = {}
    for masks, labels in gt.values():
        for c in labels:
            num_gt[int(c)] = num_gt.get(int(c), 0) + 1
    if categories is None:
        categories = sorted(num_gt)
    ap = {}
    for c in categories:
        for t in thresholds:
            _, tp, _ = match_category(detections, gt, c, t)
            ap[(c, t)] = average_precision(tp, num_gt.get(c, 0))
    n_det = sum(len(v) for v in detections.values())
    return EvalResult(ap=ap, categories=list(categories), thresholds=thresholds, num_detections=n_det, num_gt=num_gt)
