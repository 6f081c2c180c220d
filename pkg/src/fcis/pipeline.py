"""Training loop and the full inference procedure (proposals, refinement,
per-category NMS, mask voting)."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .assemble import RoiGrid, project_rois
from .backbone import Checkpoint, ModelConfig, forward_backbone, init_params
from .geometry import apply_bbox_deltas, generate_anchors, mask_to_box, nms, pairwise_iou
from .head import batch_losses, head_forward, mask_target_pixels, match_rois, ohem_select, sample_rois
from .proposals import jitter_proposals, rpn_loss, rpn_targets, sample_rpn, select_proposals
from .tensor import Tape, Tensor, backprop, bilinear_resize, sgd_step, SgdState

log = logging.getLogger(__name__)

__all__ = ["TrainConfig", "InferConfig", "Detection", "ScoredRois", "NumericError", "train", "nms",
           "mask_voting", "run_inference", "score_rois"]


class NumericError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr: float = 0.01
    lr_drop_at: float = 2.0 / 3.0  # fraction of iterations
    warmup: int = 100
    momentum: float = 0.9
    weight_decay: float = 5e-4
    clip_grad: float = 10.0
    ohem: bool = True
    ohem_n: int = 128
    rois_per_image: int = 300
    gt_rois: int = 64  # of rois_per_image, jittered copies of gt boxes
    jitter_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be > 0")
        if not 0.0 < self.lr_drop_at <= 1.0:
            raise ValueError("lr_drop_at must be within (0, 1]")
        if not 0 <= self.gt_rois <= self.rois_per_image:
            raise ValueError("gt_rois must be within [0, rois_per_image]")

    def lr_at(self, it: int) -> float:
        lr = self.lr if it < int(self.lr_drop_at * self.iterations) else self.lr * 0.1
        if self.warmup and it < self.warmup:
            lr *= (it + 1) / self.warmup
        return lr


@dataclass
class InferConfig:
    rois: int = 300
    pre_nms_top: int = 2000
    rpn_nms: float = 0.7
    score_thresh: float = 0.05
    nms_thresh: float = 0.3
    vote_iou: float = 0.5
    binarize_thresh: float = 0.4
    max_detections: int = 100


@dataclass
class Detection:
    category: int
    score: float
    box: np.ndarray
    mask: np.ndarray  # [H, W] bool


@dataclass
class ScoredRois:
    """ROIs with per-category probabilities and assembled-resolution masks."""

    boxes: np.ndarray  # [R, 4]
    class_probs: np.ndarray  # [R, C+1]
    seg_maps: list  # R arrays [C+1, rh, rw]
    grids: list  # R RoiGrid
    deltas: np.ndarray | None = None  # [R, 4]


_anchor_cache = {}


def anchors_for(config: ModelConfig, map_size) -> np.ndarray:
    key = (tuple(map_size), config.stride, config.anchor_scales, config.anchor_ratios)
    if key not in _anchor_cache:
        a = generate_anchors(map_size[0], map_size[1], config.stride, config.anchor_scales, config.anchor_ratios)
        a.flags.writeable = False
        _anchor_cache[key] = a
    return _anchor_cache[key]


# ----------------------------------------------------------------------------
# training


def _roi_pool(maps, anchors, sample, tc: TrainConfig, rng):
    H, W = sample.size
    gt = sample.boxes
    n_gt = tc.gt_rois if len(gt) else 0
    boxes, _ = select_proposals(maps.rpn_obj, maps.rpn_deltas, anchors, (H, W),
                                n=tc.rois_per_image - n_gt)
    if n_gt:
        jit, _ = jitter_proposals(gt, rng, n_gt, sigma=tc.jitter_sigma, image_size=(H, W))
        boxes = np.concatenate([jit, boxes])
    return boxes


def _head_losses(psmaps, bbox_maps, rois, labels, gi, targets, sample, mc: ModelConfig, map_size):
    batch = project_rois(rois, mc.stride, mc.k, map_size)
    fg = mask_target_pixels(batch, rois, gi, sample.masks, mc.stride)
    fwd = head_forward(psmaps, bbox_maps, batch, mc.num_classes, mc.head_mode)
    return batch_losses(fwd, labels, fg, targets)


def train_step(params: dict, sample, mc: ModelConfig, tc: TrainConfig, rng, ohem_n=None):
    """Forward/backward for one image. Returns (loss, grads by name, log row)."""
    names = list(params)
    with Tape() as tape:
        tape.watch(*params.values())
        maps = forward_backbone(sample.image, params, mc)
        map_size = maps.map_size
        anchors = anchors_for(mc, map_size)
        gt = sample.boxes

        rl, rt = rpn_targets(anchors, gt)
        rl = sample_rpn(rl, rng)
        l_rpn = rpn_loss(maps.rpn_obj, maps.rpn_deltas, rl, rt)

        rois = _roi_pool(maps, anchors, sample, tc, rng)
        labels, gi, _, targets = match_rois(rois, gt, sample.labels)
        if tc.ohem:
            # forward every ROI off the tape; only the hardest go through backprop
            scout = _head_losses(Tensor._wrap(maps.psmaps.data), Tensor._wrap(maps.bbox_maps.data),
                                 rois, labels, gi, targets, sample, mc, map_size)
            per_roi = scout[0].data + scout[1].data + scout[2].data
            keep = np.sort(ohem_select(per_roi, tc.ohem_n if ohem_n is None else ohem_n))
        else:
            keep = sample_rois(labels, rng, tc.ohem_n)
        l_det, l_seg, l_bbox = _head_losses(maps.psmaps, maps.bbox_maps, rois[keep], labels[keep], gi[keep],
                                            targets[keep], sample, mc, map_size)
        w = Tensor._wrap(np.full(len(keep), 1.0 / max(len(keep), 1), dtype=l_det.dtype))
        l_head = T.total(T.mul(T.add(T.add(l_det, l_seg), l_bbox), w))
        loss = T.add(l_head, l_rpn)
    g = backprop(tape, loss)
    grads = {n: g[params[n]] for n in names}
    row = (
        float(np.dot(l_det.data, w.data)),
        float(np.dot(l_seg.data, w.data)),
        float(np.dot(l_bbox.data, w.data)),
        float(l_rpn.item()),
    )
    return float(loss.item()), grads, row


def _clip(grads: dict, max_norm: float) -> dict:
    if not max_norm:
        return grads
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    s = max_norm / norm
    return {k: g * s for k, g in grads.items()}


def train(dataset, mc: ModelConfig, tc: TrainConfig, resume: Checkpoint | None = None, progress=None):
    """Train on ``dataset`` (list of Samples). Returns (Checkpoint, loss log).

    Loss log rows: ``(iter, l_det, l_seg, l_bbox, l_rpn, l_total)``.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    for s in dataset:
        H, W = s.size
        if H % mc.stride or W % mc.stride:
            raise ValueError(f"sample {s.sample_id}: image size {H}x{W} not divisible by stride {mc.stride}")
    if resume is not None:
        params, start = dict(resume.params), resume.iteration
    else:
        params, start = init_params(mc, tc.seed), 0
    state = SgdState(lr=tc.lr, momentum=tc.momentum, weight_decay=tc.weight_decay)
    rows = []
    t0 = time.perf_counter()
    for it in range(start, start + tc.iterations):
        rng = np.random.default_rng([tc.seed, it])
        sample = dataset[int(rng.integers(len(dataset)))]
        loss, grads, row = train_step(params, sample, mc, tc, rng)
        if not all(math.isfinite(v) for v in row):
            raise NumericError(f"non-finite loss at iteration {it + 1}: {row}")
        state.lr = tc.lr_at(it - start)
        params = sgd_step(params, _clip(grads, tc.clip_grad), state)
        rows.append((it + 1,) + row + (sum(row),))
        if progress and (it + 1) % progress == 0:
            recent = np.mean([r[-1] for r in rows[-progress:]])
            log.info("iter %d  loss %.4f  (%.1fs)", it + 1, recent, time.perf_counter() - t0)
    return Checkpoint(params=params, config=mc, iteration=start + tc.iterations), rows


# ----------------------------------------------------------------------------
# inference


def score_rois(maps, boxes, mc: ModelConfig) -> ScoredRois:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    batch = project_rois(boxes, mc.stride, mc.k, maps.map_size)
    fwd = head_forward(maps.psmaps, maps.bbox_maps, batch, mc.num_classes, mc.head_mode)
    seg = fwd.seg_probs()
    offs = batch.offsets()
    seg_maps = [seg[:, offs[r]:offs[r + 1]].reshape(-1, g.height, g.width) for r, g in enumerate(batch.grids)]
    return ScoredRois(
        boxes=boxes,
        class_probs=fwd.class_probs().T.astype(np.float64),
        seg_maps=seg_maps,
        grids=batch.grids,
        deltas=fwd.bbox_deltas.data.T.astype(np.float64),
    )


def paste_mask(prob: np.ndarray, grid: RoiGrid, box, stride: int, image_size) -> np.ndarray:
    """Lift an assembled-resolution probability map into image coordinates.

    The map is bilinearly resized to its span's image extent; pixels whose
    centers fall outside ``box`` are zero.
    """
    H, W = image_size
    out = np.zeros((H, W))
    y0, x0 = grid.y0 * stride, grid.x0 * stride
    up = bilinear_resize(Tensor(prob[None]), grid.height * stride, grid.width * stride).data[0]
    y1, x1 = min(y0 + up.shape[0], H), min(x0 + up.shape[1], W)
    out[y0:y1, x0:x1] = up[: y1 - y0, : x1 - x0]
    bx1, by1, bx2, by2 = box
    cy = np.arange(H) + 0.5
    cx = np.arange(W) + 0.5
    inside = ((cy >= by1) & (cy < by2))[:, None] & ((cx >= bx1) & (cx < bx2))[None, :]
    return out * inside


def mask_voting(candidates, scored: ScoredRois, image_size, stride: int, iou_thresh: float = 0.5,
                binarize_thresh: float = 0.4) -> list:
    """Score-weighted per-pixel average of overlapping ROI masks.

    ``candidates`` is a list of ``(box, category, score)``. Every scored ROI
    whose box IoU with a candidate exceeds ``iou_thresh`` votes with its
    mask for the candidate's category, weighted by its probability for that
    category (weights renormalized to sum to 1). Candidates whose voted mask
    is empty are dropped.
    """
    dets = []
    if not candidates:
        return dets
    cboxes = np.array([c[0] for c in candidates], dtype=np.float64)
    iou = pairwise_iou(cboxes, scored.boxes)
    for i, (box, cat, score) in enumerate(candidates):
        support = np.flatnonzero(iou[i] > iou_thresh)
        weights = scored.class_probs[support, cat]
        if weights.sum() <= 0:
            weights = np.ones(len(support))
        weights = weights / weights.sum()
        acc = np.zeros(image_size)
        for j, wj in zip(support, weights):
            acc += wj * paste_mask(scored.seg_maps[j][cat], scored.grids[j], scored.boxes[j], stride, image_size)
        mask = acc >= binarize_thresh
        if not mask.any():
            continue
        dets.append(Detection(category=int(cat), score=float(score), box=mask_to_box(mask), mask=mask))
    return dets


def run_inference(image, ckpt: Checkpoint, ic: InferConfig | None = None) -> list:
    ic = ic or InferConfig()
    mc = ckpt.config
    image = np.asarray(image, dtype=np.float32)
    H, W = image.shape[1:]
    maps = forward_backbone(image, ckpt.params, mc)
    anchors = anchors_for(mc, maps.map_size)
    props, _ = select_proposals(maps.rpn_obj, maps.rpn_deltas, anchors, (H, W), n=ic.rois,
                                pre_nms_top=ic.pre_nms_top, nms_thresh=ic.rpn_nms)
    first = score_rois(maps, props, mc)
    refined = apply_bbox_deltas(props, first.deltas, clip_to=(H, W))
    second = score_rois(maps, refined, mc)
    scored = ScoredRois(
        boxes=np.concatenate([first.boxes, second.boxes]),
        class_probs=np.concatenate([first.class_probs, second.class_probs]),
        seg_maps=first.seg_maps + second.seg_maps,
        grids=first.grids + second.grids,
    )
    fgp = scored.class_probs[:, 1:]
    cats = fgp.argmax(axis=1) + 1
    scores = fgp.max(axis=1)
    candidates = []
    for c in range(1, mc.num_classes + 1):
        idx = np.flatnonzero((cats == c) & (scores >= ic.score_thresh))
        for j in nms(scored.boxes[idx], scores[idx], ic.nms_thresh):
            candidates.append((scored.boxes[idx[j]], c, float(scores[idx[j]])))
    candidates.sort(key=lambda c: -c[2])
    candidates = candidates[: ic.max_detections]
    dets = mask_voting(candidates, scored, (H, W), mc.stride, ic.vote_iou, ic.binarize_thresh)
    dets.sort(key=lambda d: -d.score)
    return dets


# ----------------------------------------------------------------------------
# file formats


def write_loss_log(path, rows, append: bool = False) -> None:
    with open(path, "a" if append else "w", newline="\n") as f:
        if not append:
            f.write("iter,l_det,l_seg,l_bbox,l_rpn,l_total\n")
        for r in rows:
            f.write(f"{r[0]}," + ",".join(f"{v:.9g}" for v in r[1:]) + "\n")


def rle_encode(mask) -> str:
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape
    flat = m.ravel().astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        runs = [0] + runs
    return f"{h} {w} {len(runs)} " + " ".join(str(r) for r in runs)


def rle_decode(tokens) -> np.ndarray:
    h, w, n = int(tokens[0]), int(tokens[1]), int(tokens[2])
    runs = [int(t) for t in tokens[3:3 + n]]
    if len(runs) != n or sum(runs) != h * w:
        raise ValueError(f"RLE runs do not cover a {h}x{w} mask")
    vals = np.arange(n) % 2
    return np.repeat(vals, runs).astype(bool).reshape(h, w)


def write_detections(path, detections: dict) -> None:
    """``detections`` maps image id -> list of Detection."""
    with open(path, "w", newline="\n") as f:
        for image_id in sorted(detections):
            for d in detections[image_id]:
                x1, y1, x2, y2 = (float(v) for v in d.box)
                f.write(f"{image_id} {d.category} {d.score:.6f} {x1:g} {y1:g} {x2:g} {y2:g} {rle_encode(d.mask)}\n")


def read_detections(path) -> dict:
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                image_id, cat, score = int(parts[0]), int(parts[1]), float(parts[2])
                box = np.array([float(v) for v in parts[3:7]])
                mask = rle_decode(parts[7:])
            except (ValueError, IndexError) as e:
                raise ValueError(f"{path}: malformed detection on line {lineno} ({e})") from None
            out.setdefault(image_id, []).append(Detection(cat, score, box, mask))
    return out
