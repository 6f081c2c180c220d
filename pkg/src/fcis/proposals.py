"""ROI sources: a small RPN (selection, targets, losses) and gt jitter.

RPN channel layout on the penultimate feature map:
``rpn_obj[cls * A + a]`` with cls 0 = background, 1 = object, and
``rpn_deltas[a * 4 + coord]``. Flattened anchor index is
``(y * w + x) * A + a``, matching :func:`fcis.geometry.generate_anchors`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import apply_bbox_deltas, clip_boxes, encode_bbox_deltas, nms, pairwise_iou
from .tensor import Tensor

RPN_POS_IOU = 0.7
RPN_NEG_IOU = 0.3
RPN_SAMPLE_CAP = 64


@dataclass
class Proposal:
    box: np.ndarray
    score: float


def _flatten_rpn(rpn_obj: np.ndarray, rpn_deltas: np.ndarray):
    A2, h, w = rpn_obj.shape
    A = A2 // 2
    logits = rpn_obj.reshape(2, A, h, w).transpose(0, 2, 3, 1).reshape(2, -1)
    deltas = rpn_deltas.reshape(A, 4, h, w).transpose(2, 3, 0, 1).reshape(-1, 4)
    return logits, deltas


def objectness(rpn_obj) -> np.ndarray:
    """Per-anchor 2-way softmax object probability."""
    x = np.asarray(rpn_obj.data if isinstance(rpn_obj, Tensor) else rpn_obj, dtype=np.float64)
    A2, h, w = x.shape
    logits = x.reshape(2, A2 // 2, h, w).transpose(0, 2, 3, 1).reshape(2, -1)
    return 1.0 / (1.0 + np.exp(logits[0] - logits[1]))


def select_proposals(rpn_obj, rpn_deltas, anchors, image_size, n: int = 300, pre_nms_top: int = 2000,
                     nms_thresh: float = 0.7):
    """Top ``n`` proposals after NMS, as ``(boxes[n, 4], scores[n])``.

    If fewer than ``n`` boxes survive NMS, the highest-scoring suppressed
    boxes pad the list. Output is sorted by descending score.
    """
    obj = np.asarray(rpn_obj.data if isinstance(rpn_obj, Tensor) else rpn_obj, dtype=np.float64)
    dl = np.asarray(rpn_deltas.data if isinstance(rpn_deltas, Tensor) else rpn_deltas, dtype=np.float64)
    _, deltas = _flatten_rpn(obj, dl)
    scores = objectness(obj)
    anchors = np.asarray(anchors, dtype=np.float64)
    if len(anchors) != len(scores):
        raise ValueError(f"{len(anchors)} anchors but RPN maps hold {len(scores)}")
    boxes = apply_bbox_deltas(anchors, deltas, clip_to=image_size)
    order = np.argsort(-scores, kind="stable")
    cand = order[:pre_nms_top]
    kept = [cand[i] for i in nms(boxes[cand], scores[cand], nms_thresh, max_keep=n)]
    if len(kept) < n:
        seen = set(kept)
        kept += [int(i) for i in order if i not in seen][: n - len(kept)]
    kept = np.asarray(kept, dtype=np.int64)
    kept = kept[np.argsort(-scores[kept], kind="stable")]
    return boxes[kept], scores[kept]


def rpn_targets(anchors, gt_boxes):
    """Per-anchor labels (1 positive, 0 negative, -1 ignore) and delta targets."""
    anchors = np.asarray(anchors, dtype=np.float64)
    N = len(anchors)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    labels = np.full(N, -1, dtype=np.int64)
    if len(gt_boxes) == 0:
        labels[:] = 0
        return labels, np.zeros((N, 4))
    iou = pairwise_iou(anchors, gt_boxes)
    best = iou.argmax(axis=1)
    best_iou = iou[np.arange(N), best]
    labels[best_iou < RPN_NEG_IOU] = 0
    # every gt gets its best anchor(s), even below the positive threshold
    gt_best = iou.max(axis=0)
    forced = np.flatnonzero(((iou == gt_best[None, :]) & (gt_best[None, :] > 0)).any(axis=1))
    labels[forced] = 1
    labels[best_iou >= RPN_POS_IOU] = 1
    targets = encode_bbox_deltas(anchors, gt_boxes[best])
    return labels, targets


def sample_rpn(labels, rng, cap: int = RPN_SAMPLE_CAP) -> np.ndarray:
    """Subsample to at most ``cap`` positives and ``cap`` negatives; rest ignored."""
    labels = np.asarray(labels).copy()
    for value in (1, 0):
        idx = np.flatnonzero(labels == value)
        if idx.size > cap:
            drop = rng.choice(idx, idx.size - cap, replace=False)
            labels[drop] = -1
    return labels


def rpn_loss(rpn_obj: Tensor, rpn_deltas: Tensor, labels, targets) -> Tensor:
    """Cross-entropy over sampled anchors plus smooth-L1 on positives."""
    A2, h, w = rpn_obj.shape
    A = A2 // 2
    n = h * w * A
    dt = rpn_obj.dtype
    labels = np.asarray(labels)
    used = np.flatnonzero(labels >= 0)
    pos = np.flatnonzero(labels == 1)
    norm = max(used.size, 1)
    logp = T.log_softmax(T.reshape(rpn_obj, (2, A, h * w)), axis=0)
    # flat index into [2, A, h*w] of anchor i = (cell, a)
    cell, a = np.divmod(np.arange(n), A)
    idx = (labels[used] * A + a[used]) * (h * w) + cell[used]
    ce = T.scale(T.total(T.gather(logp, idx)), -1.0 / norm)
    if pos.size == 0:
        return ce
    d = T.reshape(rpn_deltas, (A, 4, h * w))
    coord = np.arange(4)
    didx = (a[pos][:, None] * 4 + coord[None, :]) * (h * w) + cell[pos][:, None]
    diff = T.sub(T.gather(d, didx), Tensor._wrap(np.asarray(targets[pos], dtype=dt)))
    reg = T.scale(T.total(T.smooth_l1(diff)), 1.0 / norm)
    return T.add(ce, reg)


def jitter_proposals(gt_boxes, rng, n: int, sigma: float = 0.1, image_size=None):
    """``n`` noisy copies of the gt boxes (round robin), as ``(boxes, scores)``."""
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt) == 0:
        raise ValueError("jitter_proposals needs at least one gt box")
    src = gt[np.arange(n) % len(gt)]
    noise = rng.normal(0.0, 1.0, size=(n, 4)) * sigma
    boxes = apply_bbox_deltas(src, noise)
    if image_size is not None:
        boxes = clip_boxes(boxes, image_size)
    return boxes, rng.uniform(0.0, 1.0, size=n)
