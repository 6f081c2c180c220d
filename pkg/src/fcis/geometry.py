"""Box algebra: IoU, bbox-delta encoding, anchors, mask IoU.

Boxes are ``(x1, y1, x2, y2)`` in continuous image-pixel coordinates with
width ``x2 - x1`` (no +1). Functions accept a single box of shape ``(4,)`` or
an array of shape ``(N, 4)``.
"""

import math

import numpy as np

# dw/dh are clamped before exponentiation so untrained heads cannot overflow
DELTA_CLAMP = math.log(1000.0 / 16)


def _boxes(b) -> np.ndarray:
    return np.asarray(b, dtype=np.float64)


def box_area(b) -> np.ndarray:
    b = _boxes(b)
    return np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)


def box_iou(a, b) -> float:
    """IoU of two single boxes; 0 when disjoint."""
    return float(pairwise_iou(_boxes(a)[None], _boxes(b)[None])[0, 0])


def pairwise_iou(a, b) -> np.ndarray:
    """IoU matrix of shape (len(a), len(b))."""
    a = _boxes(a).reshape(-1, 4)
    b = _boxes(b).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


def mask_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask_iou: dimension mismatch {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def mask_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between mask stacks ``a[N,H,W]`` and ``b[M,H,W]``."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"mask_iou_matrix: dimension mismatch {a.shape[1:]} vs {b.shape[1:]}")
    fa = a.reshape(len(a), -1).astype(np.float64)
    fb = b.reshape(len(b), -1).astype(np.float64)
    inter = fa @ fb.T
    union = fa.sum(1)[:, None] + fb.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def mask_to_box(mask) -> np.ndarray:
    """Tight bounding rectangle of a non-empty mask."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("mask_to_box: empty mask")
    return np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)


def _centers(b):
    w = b[..., 2] - b[..., 0]
    h = b[..., 3] - b[..., 1]
    return b[..., 0] + 0.5 * w, b[..., 1] + 0.5 * h, w, h


def encode_bbox_deltas(src, target) -> np.ndarray:
    """(dx, dy, dw, dh) taking ``src`` onto ``target``."""
    src = _boxes(src)
    target = _boxes(target)
    sx, sy, sw, sh = _centers(src)
    if np.any(sw <= 0) or np.any(sh <= 0):
        raise ValueError("encode_bbox_deltas: degenerate source box (zero extent)")
    tx, ty, tw, th = _centers(target)
    return np.stack([(tx - sx) / sw, (ty - sy) / sh, np.log(tw / sw), np.log(th / sh)], axis=-1)


def apply_bbox_deltas(src, deltas, clip_to=None) -> np.ndarray:
    """Inverse of :func:`encode_bbox_deltas`.

    ``clip_to`` is ``(height, width)``; when given, boxes are clipped to the
    image and widened to at least one pixel.
    """
    src = _boxes(src)
    d = np.asarray(deltas, dtype=np.float64)
    sx, sy, sw, sh = _centers(src)
    cx = sx + d[..., 0] * sw
    cy = sy + d[..., 1] * sh
    w = sw * np.exp(np.minimum(d[..., 2], DELTA_CLAMP))
    h = sh * np.exp(np.minimum(d[..., 3], DELTA_CLAMP))
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)
    if clip_to is not None:
        out = clip_boxes(out, clip_to)
    return out


def clip_boxes(boxes, image_size) -> np.ndarray:
    """Clip to ``[0, W] x [0, H]`` and repair to a minimum 1-pixel extent."""
    H, W = image_size
    b = _boxes(boxes).copy()
    b[..., 0::2] = np.clip(b[..., 0::2], 0, W)
    b[..., 1::2] = np.clip(b[..., 1::2], 0, H)
    for lo, hi, lim in ((0, 2, W), (1, 3, H)):
        short = b[..., hi] - b[..., lo] < 1.0
        if np.any(short):
            mid = np.clip(0.5 * (b[..., lo] + b[..., hi]), 0.5, lim - 0.5)
            b[..., lo] = np.where(short, mid - 0.5, b[..., lo])
            b[..., hi] = np.where(short, mid + 0.5, b[..., hi])
    return b


def generate_anchors(map_h, map_w, stride, scales=(16, 32, 64), ratios=(0.5, 1.0, 2.0)) -> np.ndarray:
    """Anchors of shape ``(map_h * map_w * len(ratios) * len(scales), 4)``.

    Ordering: row-major over cells, then ratio-major / scale-minor within a
    cell. ``ratio`` is height / width; every anchor at scale ``s`` has area s².
    """
    base = []
    for r in ratios:
        for s in scales:
            w = s / math.sqrt(r)
            h = s * math.sqrt(r)
            base.append((-0.5 * w, -0.5 * h, 0.5 * w, 0.5 * h))
    base = np.array(base)
    ys, xs = np.meshgrid(np.arange(map_h), np.arange(map_w), indexing="ij")
    cx = (xs.ravel() + 0.5) * stride
    cy = (ys.ravel() + 0.5) * stride
    shifts = np.stack([cx, cy, cx, cy], axis=1)
    return (shifts[:, None, :] + base[None, :, :]).reshape(-1, 4)


def nms(boxes, scores, thresh: float = 0.3, max_keep: int | None = None) -> list:
    """Greedy non-maximum suppression.

    Boxes are visited by descending score (ties: lower index first); a box is
    dropped if its IoU with an already kept box exceeds ``thresh``.
    """
    boxes = _boxes(boxes).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    if len(boxes) != len(scores):
        raise ValueError(f"nms: {len(boxes)} boxes but {len(scores)} scores")
    order = np.argsort(-scores, kind="stable")
    b = boxes[order]
    area = box_area(b)
    removed = np.zeros(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if max_keep is not None and len(keep) >= max_keep:
            break
        if removed[i]:
            continue
        keep.append(int(order[i]))
        rest = b[i + 1:]
        iw = np.clip(np.minimum(b[i, 2], rest[:, 2]) - np.maximum(b[i, 0], rest[:, 0]), 0, None)
        ih = np.clip(np.minimum(b[i, 3], rest[:, 3]) - np.maximum(b[i, 1], rest[:, 1]), 0, None)
        inter = iw * ih
        union = area[i] + area[i + 1:] - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            iou = np.where(union > 0, inter / union, 0.0)
        removed[i + 1:] |= iou > thresh
    return keep
