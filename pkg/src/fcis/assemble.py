"""Position-sensitive ROI assembling (copy-paste of k x k cells).

Score-map channel layout: ``channel = group * k² + cy * k + cx``. For the
inside/outside maps ``group = inout * (C + 1) + category``; for the bbox maps
``group = coordinate``.

The per-ROI output at map pixel (y, x) of the ROI span is the value of the
channel belonging to that pixel's cell, read at the same map pixel. There is
no interpolation and no resizing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, emit


@dataclass
class RoiGrid:
    roi: np.ndarray  # box in score-map coordinates
    x0: int
    y0: int
    x1: int  # exclusive
    y1: int  # exclusive
    k: int
    cells: np.ndarray  # [rh, rw] cell index in [0, k²)

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def width(self) -> int:
        return self.x1 - self.x0


def _span(lo: float, hi: float, stride: int, limit: int):
    a = min(max(math.floor(lo / stride), 0), limit)
    b = min(max(math.ceil(hi / stride), 0), limit)
    if b - a < 1:
        a = min(a, limit - 1)
        b = a + 1
    return a, b


def cell_table(rh: int, rw: int, k: int) -> np.ndarray:
    cy = np.minimum(np.arange(rh) * k // rh, k - 1)
    cx = np.minimum(np.arange(rw) * k // rw, k - 1)
    return cy[:, None] * k + cx[None, :]


def project_roi(box, stride: int, k: int, map_size) -> RoiGrid:
    """Project an image-space box onto the score map; span rounds outward."""
    h, w = map_size
    x1, y1, x2, y2 = (float(v) for v in box)
    gx0, gx1 = _span(x1, x2, stride, w)
    gy0, gy1 = _span(y1, y2, stride, h)
    cells = cell_table(gy1 - gy0, gx1 - gx0, k)
    roi = np.array([x1, y1, x2, y2]) / stride
    return RoiGrid(roi=roi, x0=gx0, y0=gy0, x1=gx1, y1=gy1, k=k, cells=cells)


def _check(maps_shape, grid: RoiGrid):
    ch, h, w = maps_shape
    if ch % (grid.k * grid.k):
        raise ValueError(f"{ch} channels is not a multiple of k²={grid.k ** 2}")
    if grid.x0 < 0 or grid.y0 < 0 or grid.x1 > w or grid.y1 > h or grid.x1 <= grid.x0 or grid.y1 <= grid.y0:
        raise ValueError(f"ROI span ({grid.x0},{grid.y0},{grid.x1},{grid.y1}) out of bounds for map {h}x{w}")


def assemble(psmaps, grid: RoiGrid, groups=None) -> np.ndarray:
    """Per-ROI maps of shape ``[ch / k², rh, rw]``.

    ``groups`` optionally reshapes the leading axis, e.g. ``(2, C + 1)``.
    """
    x = psmaps.data if isinstance(psmaps, Tensor) else np.asarray(psmaps)
    _check(x.shape, grid)
    k2 = grid.k * grid.k
    g = x.shape[0] // k2
    crop = x[:, grid.y0:grid.y1, grid.x0:grid.x1].reshape(g, k2, grid.height, grid.width)
    yy, xx = np.indices(grid.cells.shape)
    out = crop[:, grid.cells, yy, xx]
    return out.reshape(tuple(groups) + out.shape[1:]) if groups else out


def assemble_backward(grad_out, grid: RoiGrid, map_shape) -> np.ndarray:
    """Adjoint of :func:`assemble`: scatter-add into a zero score-map gradient."""
    _check(map_shape, grid)
    k2 = grid.k * grid.k
    ch, h, w = map_shape
    g = np.asarray(grad_out).reshape(ch // k2, grid.height, grid.width)
    grad = np.zeros(map_shape, dtype=g.dtype)
    view = grad.reshape(ch // k2, k2, h, w)
    yy, xx = np.indices(grid.cells.shape)
    np.add.at(view, (slice(None), grid.cells, yy + grid.y0, xx + grid.x0), g)
    return grad


@dataclass
class RoiBatch:
    """Flattened pixel lists of many ROI grids on one score map."""

    spans: np.ndarray  # [R, 4] x0, y0, x1, y1 (exclusive ends)
    boxes: np.ndarray  # [R, 4] ROI boxes in score-map coordinates
    roi: np.ndarray  # [P] ROI index of each pixel
    cell: np.ndarray  # [P]
    pix: np.ndarray  # [P] y * w + x on the map
    ys: np.ndarray  # [P] map row
    xs: np.ndarray  # [P] map column
    map_size: tuple
    k: int
    _grids: list = field(default=None, repr=False)

    @property
    def num_rois(self) -> int:
        return len(self.spans)

    @property
    def num_pixels(self) -> int:
        return self.pix.size

    @property
    def grids(self) -> list:
        if self._grids is None:
            self._grids = [
                RoiGrid(roi=b, x0=int(x0), y0=int(y0), x1=int(x1), y1=int(y1), k=self.k,
                        cells=cell_table(int(y1 - y0), int(x1 - x0), self.k))
                for b, (x0, y0, x1, y1) in zip(self.boxes, self.spans)
            ]
        return self._grids

    def pixel_counts(self) -> np.ndarray:
        return (self.spans[:, 2] - self.spans[:, 0]) * (self.spans[:, 3] - self.spans[:, 1])

    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.pixel_counts())])


def _pixels(spans, k: int, map_size):
    """Row-major pixel lists of every span, with their cell indices."""
    w = map_size[1]
    rw = spans[:, 2] - spans[:, 0]
    rh = spans[:, 3] - spans[:, 1]
    counts = rw * rh
    roi = np.repeat(np.arange(len(spans), dtype=np.int64), counts)
    t = np.arange(roi.size, dtype=np.int64) - np.repeat(np.cumsum(counts) - counts, counts)
    rw_p, rh_p = rw[roi], rh[roi]
    ly, lx = t // rw_p, t % rw_p
    cell = np.minimum(ly * k // rh_p, k - 1) * k + np.minimum(lx * k // rw_p, k - 1)
    ys = spans[roi, 1] + ly
    xs = spans[roi, 0] + lx
    return roi, cell, ys * w + xs, ys, xs


def batch_grids(grids, map_size) -> RoiBatch:
    k = grids[0].k if grids else 1
    spans = np.array([[g.x0, g.y0, g.x1, g.y1] for g in grids], dtype=np.int64).reshape(-1, 4)
    boxes = np.array([g.roi for g in grids], dtype=np.float64).reshape(-1, 4)
    roi, cell, pix, ys, xs = _pixels(spans, k, map_size)
    # keep the callers' cell tables; they may differ from the span-derived ones
    if grids:
        cell = np.concatenate([g.cells.ravel() for g in grids]).astype(np.int64)
    return RoiBatch(spans=spans, boxes=boxes, roi=roi, cell=cell, pix=pix, ys=ys, xs=xs,
                    map_size=tuple(map_size), k=k, _grids=list(grids))


def _spans(lo, hi, stride: int, limit: int):
    a = np.clip(np.floor(lo / stride), 0, limit).astype(np.int64)
    b = np.clip(np.ceil(hi / stride), 0, limit).astype(np.int64)
    short = b - a < 1
    a = np.where(short, np.minimum(a, limit - 1), a)
    b = np.where(short, a + 1, b)
    return a, b


def project_rois(boxes, stride: int, k: int, map_size) -> RoiBatch:
    """Vectorized :func:`project_roi` over ``[R, 4]`` boxes."""
    h, w = map_size
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    x0, x1 = _spans(boxes[:, 0], boxes[:, 2], stride, w)
    y0, y1 = _spans(boxes[:, 1], boxes[:, 3], stride, h)
    spans = np.stack([x0, y0, x1, y1], axis=1)
    roi, cell, pix, ys, xs = _pixels(spans, k, map_size)
    return RoiBatch(spans=spans, boxes=boxes / stride, roi=roi, cell=cell, pix=pix, ys=ys, xs=xs,
                    map_size=(h, w), k=k)


def assemble_batch(maps: Tensor, batch: RoiBatch) -> Tensor:
    """Taped assembling of every ROI in ``batch``: ``[ch / k², P]``."""
    ch, h, w = maps.shape
    k2 = batch.k * batch.k
    if ch % k2:
        raise ValueError(f"{ch} channels is not a multiple of k²={k2}")
    if (h, w) != tuple(batch.map_size):
        raise ValueError(f"ROI batch built for map {batch.map_size}, got {(h, w)}")
    g = ch // k2
    col = batch.cell * (h * w) + batch.pix
    flat = maps.data.reshape(g, k2 * h * w)
    out = flat[:, col]

    def back(grad):
        idx = (np.arange(g, dtype=np.int64)[:, None] * (k2 * h * w) + col[None, :]).ravel()
        gm = np.bincount(idx, weights=grad.ravel(), minlength=g * k2 * h * w)
        return (gm.astype(maps.dtype).reshape(maps.shape),)

    return emit(out, (maps,), back)
