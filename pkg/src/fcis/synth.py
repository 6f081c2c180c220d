"""Synthetic instance-segmentation scenes and their on-disk format.

Each scene is a noisy flat-colored background with 0..N flat-colored shapes
(rectangle, ellipse, triangle) painted back to front, so later shapes occlude
earlier ones.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .geometry import mask_to_box

CATEGORIES = ("rectangle", "ellipse", "triangle")
MIN_VISIBLE = 25

DEFAULT_PALETTE = (
    (0.90, 0.20, 0.20),
    (0.20, 0.75, 0.25),
    (0.20, 0.35, 0.90),
    (0.95, 0.85, 0.20),
    (0.85, 0.30, 0.85),
    (0.20, 0.85, 0.85),
    (0.95, 0.55, 0.15),
    (0.95, 0.95, 0.95),
)


@dataclass
class DatasetConfig:
    seed: int = 0
    count: int = 100
    image_size: int = 128
    min_instances: int = 1
    max_instances: int = 5
    min_size: int = 20
    max_size: int = 56
    palette: tuple = DEFAULT_PALETTE
    noise: float = 0.04
    max_retries: int = 20

    def __post_init__(self):
        if self.min_instances > self.max_instances or self.min_instances < 0:
            raise ValueError("instance count range is empty")
        if self.min_size > self.max_size or self.min_size < 4:
            raise ValueError("size range is empty")
        if not self.palette:
            raise ValueError("palette is empty")


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1], multiples of 1/255
    masks: np.ndarray  # [N, H, W] bool, disjoint
    labels: np.ndarray  # [N] int, category ids in 1..C
    sample_id: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def boxes(self) -> np.ndarray:
        if len(self.masks) == 0:
            return np.zeros((0, 4))
        return np.stack([mask_to_box(m) for m in self.masks])

    @property
    def size(self) -> tuple:
        return self.image.shape[1:]


def from_uint8(q: np.ndarray) -> np.ndarray:
    return q.astype(np.float32) / np.float32(255.0)


def shape_mask(category: int, box, size: int) -> np.ndarray:
    """Rasterize a shape of ``category`` inscribed in ``box`` at pixel centers."""
    x1, y1, x2, y2 = box
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    if category == 1:
        return (xs >= x1) & (xs < x2) & (ys >= y1) & (ys < y2)
    if category == 2:
        cx, cy = 0.5 * (x1 + x2), 0.5 * (y1 + y2)
        rx, ry = 0.5 * (x2 - x1), 0.5 * (y2 - y1)
        return ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
    if category == 3:
        # apex centered on top edge, base along bottom edge
        t = (ys - y1) / (y2 - y1)
        half = 0.5 * (x2 - x1) * t
        cx = 0.5 * (x1 + x2)
        return (t >= 0) & (t <= 1) & (np.abs(xs - cx) <= half)
    raise ValueError(f"unknown category {category}")


def resolve_occlusion(masks) -> np.ndarray:
    """Visible masks when ``masks`` are painted in order (later on top)."""
    masks = np.asarray(masks, dtype=bool)
    visible = masks.copy()
    covered = np.zeros(masks.shape[1:], dtype=bool)
    for i in range(len(masks) - 1, -1, -1):
        visible[i] &= ~covered
        covered |= masks[i]
    return visible


def _draw_instance(rng, config: DatasetConfig):
    size = config.image_size
    category = int(rng.integers(1, len(CATEGORIES) + 1))
    w = rng.uniform(config.min_size, config.max_size)
    h = rng.uniform(config.min_size, config.max_size)
    x1 = rng.uniform(0, size - w)
    y1 = rng.uniform(0, size - h)
    mask = shape_mask(category, (x1, y1, x1 + w, y1 + h), size)
    return category, mask


def generate_scene(rng: np.random.Generator, config: DatasetConfig, sample_id: int = 0) -> Sample:
    size = config.image_size
    n = int(rng.integers(config.min_instances, config.max_instances + 1))
    drawn, cats = [], []
    for _ in range(n):
        for _ in range(config.max_retries):
            category, mask = _draw_instance(rng, config)
            trial = resolve_occlusion(drawn + [mask])
            if trial.reshape(len(trial), -1).sum(1).min() >= MIN_VISIBLE:
                drawn.append(mask)
                cats.append(category)
                break
    visible = resolve_occlusion(drawn) if drawn else np.zeros((0, size, size), dtype=bool)

    palette = np.asarray(config.palette, dtype=np.float64)
    bg = rng.uniform(0.05, 0.45, size=3)
    image = np.empty((3, size, size))
    image[:] = bg[:, None, None]
    # distinct colors within a scene so touching instances stay separable
    picks = rng.choice(len(palette), size=len(visible), replace=len(visible) > len(palette))
    for m, c in zip(visible, picks):
        image[:, m] = palette[c][:, None]
    image += rng.normal(0.0, config.noise, size=image.shape)
    return Sample(
        image=from_uint8(np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)),
        masks=visible,
        labels=np.asarray(cats, dtype=np.int64),
        sample_id=sample_id,
    )


def generate_dataset(config: DatasetConfig) -> list:
    """Pure function of ``config``; each sample has its own RNG stream."""
    streams = np.random.SeedSequence(config.seed).spawn(config.count)
    return [generate_scene(np.random.default_rng(s), config, sample_id=i) for i, s in enumerate(streams)]


# ----------------------------------------------------------------------------
# on-disk format


def write_dataset(directory, samples) -> None:
    os.makedirs(directory, exist_ok=True)
    ids = []
    for s in samples:
        i = s.sample_id
        stem = os.path.join(directory, f"{i:05d}")
        rgb = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(rgb).save(stem + ".img.png")
        if len(s.masks) > 255:
            raise ValueError(f"sample {i}: more than 255 instances")
        inst = np.zeros(s.size, dtype=np.uint8)
        for k, m in enumerate(s.masks):
            inst[m] = k + 1
        Image.fromarray(inst).save(stem + ".inst.png")
        with open(stem + ".labels.txt", "w", newline="\n") as f:
            for k, c in enumerate(s.labels):
                f.write(f"{k + 1} {int(c)}\n")
        ids.append(i)
    with open(os.path.join(directory, "index.txt"), "w", newline="\n") as f:
        f.writelines(f"{i}\n" for i in ids)


def _read_png(path, mode):
    try:
        with Image.open(path) as im:
            if im.mode != mode:
                raise ValueError(f"{path}: expected PNG mode {mode}, got {im.mode}")
            return np.asarray(im)
    except (OSError, SyntaxError) as e:
        raise ValueError(f"{path}: unreadable PNG ({e})") from e


def _read_labels(path) -> dict:
    labels = {}
    with open(path, "rb") as f:
        raw = f.read()
    offset = 0
    for lineno, line in enumerate(raw.split(b"\n"), 1):
        if line.strip():
            parts = line.split()
            try:
                if len(parts) != 2:
                    raise ValueError
                inst, cat = int(parts[0]), int(parts[1])
            except ValueError:
                raise ValueError(f"{path}: malformed line {lineno} at byte offset {offset}") from None
            labels[inst] = cat
        offset += len(line) + 1
    return labels


def read_sample(directory, i: int) -> Sample:
    stem = os.path.join(directory, f"{i:05d}")
    rgb = _read_png(stem + ".img.png", "RGB")
    inst = _read_png(stem + ".inst.png", "L")
    labels = _read_labels(stem + ".labels.txt")
    if inst.shape != rgb.shape[:2]:
        raise ValueError(f"{stem}.inst.png: size {inst.shape} differs from image {rgb.shape[:2]}")
    ids = sorted(labels)
    present = set(np.unique(inst).tolist()) - {0}
    if present != set(ids):
        raise ValueError(f"{stem}.labels.txt: instance ids {ids} do not match mask ids {sorted(present)}")
    masks = np.stack([inst == k for k in ids]) if ids else np.zeros((0,) + inst.shape, dtype=bool)
    return Sample(image=from_uint8(rgb.transpose(2, 0, 1)), masks=masks, labels=np.asarray([labels[k] for k in ids], dtype=np.int64), sample_id=i)


def read_index(directory) -> list:
    path = os.path.join(directory, "index.txt")
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if line.strip():
                try:
                    out.append(int(line))
                except ValueError:
                    raise ValueError(f"{path}: malformed sample id on line {lineno}") from None
    return out


def read_dataset(directory) -> list:
    return [read_sample(directory, i) for i in read_index(directory)]
