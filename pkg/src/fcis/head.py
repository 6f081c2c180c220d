"""Joint mask prediction and classification over assembled inside/outside maps.

Per ROI pixel and category the two assembled scores are fused twice:
a pairwise softmax over (inside, outside) gives the foreground probability,
and max(inside, outside) gives a detection likelihood that is average-pooled
over the ROI and soft-maxed across categories.

``separate`` mode is the ablation with unrelated score sets: inside maps
drive a per-pixel logistic mask, outside maps drive R-FCN style per-cell
pooling and voting for classification. ``translation_invariant`` is the
joint head with k = 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .assemble import RoiBatch, RoiGrid, assemble_batch, batch_grids, cell_table, project_rois
from .geometry import encode_bbox_deltas, pairwise_iou
from .tensor import Tensor

POSITIVE_IOU = 0.5


@dataclass
class RoiOutput:
    class_probs: np.ndarray  # [C+1], index 0 = background
    seg_probs: np.ndarray  # [C+1, rh, rw]
    bbox_deltas: np.ndarray | None = None  # [4]
    roi: np.ndarray | None = None


@dataclass
class RoiTarget:
    label: int  # 0 = negative
    mask: np.ndarray | None  # [rh, rw] bool, positives only
    bbox_target: np.ndarray  # [4]
    gt_index: int = -1
    iou: float = 0.0


@dataclass
class HeadForward:
    seg_logits: Tensor  # [2, C+1, P] inside, outside scores fed to the pairwise softmax
    class_logp: Tensor  # [C+1, R]
    bbox_deltas: Tensor | None  # [4, R]
    batch: RoiBatch

    @property
    def seg_logp(self) -> Tensor:
        """log P(inside), log P(outside) for every category and pixel."""
        return T.log_softmax(self.seg_logits, axis=0)

    def seg_probs(self) -> np.ndarray:
        """Foreground probabilities ``[C+1, P]``."""
        return np.exp(self.seg_logp.data[0])

    def class_probs(self) -> np.ndarray:
        return np.exp(self.class_logp.data)


def fuse_assembled(A: Tensor, batch: RoiBatch, num_classes: int, mode: str = "joint") -> tuple:
    """Fuse assembled maps ``A[2(C+1), P]`` into (seg_logits, class_logp).

    The per-pixel mask probability is the softmax of ``seg_logits`` over its
    leading (inside, outside) axis; it is left unnormalized so the losses can
    normalize only the pixels they read.
    """
    c1 = num_classes + 1
    R = batch.num_rois
    P = batch.num_pixels
    A3 = T.reshape(A, (2, c1, P))
    inside = T.select(A3, 0)
    outside = T.select(A3, 1)
    if mode == "separate":
        keep = np.zeros((2, c1, P), dtype=A.dtype)
        keep[0] = 1
        seg_logits = T.mul(A3, Tensor._wrap(keep))
        k2 = batch.k * batch.k
        cell_seg = batch.roi * k2 + batch.cell
        per_cell = T.segment_mean(outside, cell_seg, R * k2)
        counts = np.bincount(cell_seg, minlength=R * k2)
        nonempty = np.flatnonzero(counts)
        cols = (np.arange(c1)[:, None] * (R * k2) + nonempty[None, :])
        votes = T.gather(per_cell, cols)
        pooled = T.segment_mean(votes, nonempty // k2, R)
    else:
        seg_logits = A3
        pooled = T.segment_mean(T.maximum(inside, outside), batch.roi, R)
    return seg_logits, T.log_softmax(pooled, axis=0)


def head_forward(psmaps: Tensor, bbox_maps: Tensor | None, batch: RoiBatch, num_classes: int,
                 mode: str = "joint") -> HeadForward:
    A = assemble_batch(psmaps, batch)
    seg_logits, class_logp = fuse_assembled(A, batch, num_classes, mode)
    deltas = None
    if bbox_maps is not None:
        deltas = T.segment_mean(assemble_batch(bbox_maps, batch), batch.roi, batch.num_rois)
    return HeadForward(seg_logits, class_logp, deltas, batch)


def fuse(assembled, mode: str = "joint", k: int | None = None) -> RoiOutput:
    """Fuse one ROI's assembled maps ``[2, C+1, rh, rw]`` into probabilities."""
    a = np.asarray(assembled.data if isinstance(assembled, Tensor) else assembled, dtype=np.float64)
    _, c1, rh, rw = a.shape
    kk = k if k is not None else 1
    grid = RoiGrid(roi=np.array([0, 0, rw, rh], float), x0=0, y0=0, x1=rw, y1=rh, k=kk,
                   cells=cell_table(rh, rw, kk))
    batch = batch_grids([grid], (rh, rw))
    seg_logits, class_logp = fuse_assembled(Tensor(a.reshape(2 * c1, rh * rw)), batch, c1 - 1, mode)
    seg_logp = T.log_softmax(seg_logits, axis=0)
    return RoiOutput(
        class_probs=np.exp(class_logp.data[:, 0]),
        seg_probs=np.exp(seg_logp.data[0]).reshape(c1, rh, rw),
    )


# ----------------------------------------------------------------------------
# targets


def match_rois(rois, gt_boxes, gt_labels):
    """Best-IoU ground truth per ROI.

    Returns ``(labels, gt_index, iou, bbox_targets)``. ``gt_index`` is -1 when
    there is no ground truth at all.
    """
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    R = len(rois)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt_boxes) == 0:
        return np.zeros(R, np.int64), np.full(R, -1), np.zeros(R), np.zeros((R, 4))
    iou = pairwise_iou(rois, gt_boxes)
    best = iou.argmax(axis=1)
    best_iou = iou[np.arange(R), best]
    labels = np.where(best_iou > POSITIVE_IOU, np.asarray(gt_labels)[best], 0).astype(np.int64)
    targets = encode_bbox_deltas(rois, gt_boxes[best])
    return labels, best, best_iou, targets


def mask_target_pixels(batch: RoiBatch, rois, gt_index, gt_masks, stride: int) -> np.ndarray:
    """Foreground flag of each batch pixel w.r.t. its ROI's matched instance.

    Nearest-neighbor sampling at the map pixel's center; samples falling
    outside the ROI box count as background.
    """
    fg = np.zeros(batch.num_pixels, dtype=bool)
    if len(gt_masks) == 0 or batch.num_pixels == 0:
        return fg
    gt_masks = np.asarray(gt_masks, dtype=bool)
    H, W = gt_masks.shape[1:]
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    py = (batch.ys + 0.5) * stride
    px = (batch.xs + 0.5) * stride
    box = rois[batch.roi]
    inside = (px >= box[:, 0]) & (px < box[:, 2]) & (py >= box[:, 1]) & (py < box[:, 3])
    gi = np.asarray(gt_index)[batch.roi]
    iy = np.clip(np.floor(py).astype(np.int64), 0, H - 1)
    ix = np.clip(np.floor(px).astype(np.int64), 0, W - 1)
    valid = gi >= 0
    fg[valid] = gt_masks[gi[valid], iy[valid], ix[valid]]
    return fg & inside


def assign_roi_labels(rois, gt_boxes, gt_labels, gt_masks, stride: int, k: int, map_size) -> list:
    """Per-ROI training targets with mask targets at assembled resolution."""
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    labels, gi, iou, targets = match_rois(rois, gt_boxes, gt_labels)
    batch = project_rois(rois, stride, k, map_size)
    fg = mask_target_pixels(batch, rois, gi, gt_masks, stride)
    offs = batch.offsets()
    out = []
    for r, g in enumerate(batch.grids):
        mask = fg[offs[r]:offs[r + 1]].reshape(g.height, g.width) if labels[r] > 0 else None
        out.append(RoiTarget(label=int(labels[r]), mask=mask, bbox_target=targets[r],
                             gt_index=int(gi[r]), iou=float(iou[r])))
    return out


# ----------------------------------------------------------------------------
# losses


def batch_losses(fwd: HeadForward, labels, fg_pixels, bbox_targets):
    """Per-ROI (L_det, L_seg, L_bbox) tensors of shape [R].

    The mask loss is the mean per-pixel cross-entropy over the ROI's
    assembled map, using the ground-truth category's maps only. Mask and box
    terms are zero for negative ROIs.
    """
    batch = fwd.batch
    R, P = batch.num_rois, batch.num_pixels
    c1 = fwd.class_logp.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    dt = fwd.class_logp.dtype

    l_det = -T.gather(fwd.class_logp, labels * R + np.arange(R))

    pos = labels > 0
    pix_label = labels[batch.roi]
    sel = np.flatnonzero(pix_label > 0)
    n = sel.size
    # inside/outside pair of the gt category only, normalized pixel by pixel
    base = pix_label[sel] * P + sel
    pair = T.reshape(T.gather(fwd.seg_logits, np.concatenate([base, base + c1 * P])), (2, n))
    inout = np.where(fg_pixels[sel], 0, 1)
    picked = T.gather(T.log_softmax(pair, axis=0), inout * n + np.arange(n))
    counts = batch.pixel_counts()
    w = Tensor._wrap((-1.0 / counts[batch.roi[sel]]).astype(dt))
    l_seg = T.segment_sum(T.mul(picked, w), batch.roi[sel], R)

    if fwd.bbox_deltas is not None:
        diff = T.sub(fwd.bbox_deltas, Tensor._wrap(np.asarray(bbox_targets, dtype=dt).T.copy()))
        per = T.total(T.smooth_l1(diff), axis=0)
        l_bbox = T.mul(per, Tensor._wrap(pos.astype(dt)))
    else:
        l_bbox = Tensor._wrap(np.zeros(R, dtype=dt))
    return l_det, l_seg, l_bbox


def roi_losses(output: RoiOutput, target: RoiTarget) -> tuple:
    """(L_det, L_seg, L_bbox, L_total) for a single ROI."""
    label = target.label
    l_det = -float(np.log(output.class_probs[label]))
    if label == 0:
        return l_det, 0.0, 0.0, l_det
    if target.mask is None:
        raise ValueError("positive ROI target without a mask")
    p = np.asarray(output.seg_probs[label], dtype=np.float64)
    m = np.asarray(target.mask, dtype=bool)
    l_seg = float(-np.where(m, np.log(p), np.log1p(-p)).sum() / p.size)
    l_bbox = 0.0
    if output.bbox_deltas is not None:
        d = np.asarray(output.bbox_deltas, dtype=np.float64) - np.asarray(target.bbox_target)
        ad = np.abs(d)
        l_bbox = float(np.where(ad < 1.0, 0.5 * d * d, ad - 0.5).sum())
    return l_det, l_seg, l_bbox, l_det + l_seg + l_bbox


def ohem_select(losses, n: int = 128) -> np.ndarray:
    """Indices of the ``n`` highest losses, ties to the lower index."""
    losses = np.asarray(losses, dtype=np.float64)
    order = np.lexsort((np.arange(losses.size), -losses))
    return order[:n]


def sample_rois(labels, rng, n: int = 128, max_pos_fraction: float = 0.25) -> np.ndarray:
    """Random minibatch with a cap on the positive fraction."""
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels > 0)
    neg = np.flatnonzero(labels == 0)
    n_pos = min(pos.size, int(n * max_pos_fraction))
    n_neg = min(neg.size, n - n_pos)
    pick = np.concatenate([rng.choice(pos, n_pos, replace=False), rng.choice(neg, n_neg, replace=False)])
    return np.sort(pick).astype(np.int64)
