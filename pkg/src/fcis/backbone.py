"""Fully convolutional trunk and the sibling 1x1 heads.

Trunk: six 3x3 conv+relu stages. The first five reach the configured
feature stride with stride-2 convs; the last keeps stride 1 and is dilated
instead, so its field of view matches a stride-2 stage. A 1x1 reduction conv
follows, then the position-sensitive score-map head and the bbox head. The
RPN branch hangs off the penultimate stage.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import config as cfgmod
from .tensor import Tensor, conv2d, read_tensor, relu, write_tensor

HEAD_MODES = ("joint", "separate", "translation_invariant")


@dataclass
class ModelConfig:
    k: int = 3
    num_classes: int = 3
    stride: int = 8
    widths: tuple = (16, 32, 32, 64, 64, 128)
    dilation: int = 2
    reduce_channels: int = 128
    rpn_channels: int = 64
    head_mode: str = "joint"
    anchor_scales: tuple = (16, 32, 64)
    anchor_ratios: tuple = (0.5, 1.0, 2.0)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.anchor_scales = tuple(self.anchor_scales)
        self.anchor_ratios = tuple(float(r) for r in self.anchor_ratios)
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")
        if self.head_mode == "translation_invariant":
            self.k = 1
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if len(self.widths) != 6:
            raise ValueError("trunk needs exactly 6 stage widths")
        n_down = math.log2(self.stride) if self.stride > 0 else -1
        if n_down != int(n_down) or not 0 <= n_down <= 5:
            raise ValueError(f"stride must be a power of two between 1 and 32, got {self.stride}")

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    @property
    def ps_channels(self) -> int:
        return 2 * self.k * self.k * (self.num_classes + 1)

    @property
    def bbox_channels(self) -> int:
        return 4 * self.k * self.k

    def stage_strides(self) -> list:
        n_down = int(math.log2(self.stride))
        down = sorted([0, 2, 4, 1, 3][:n_down])
        return [2 if i in down else 1 for i in range(5)] + [1]


@dataclass
class ScoreMapSet:
    psmaps: Tensor  # [2k²(C+1), h, w]
    bbox_maps: Tensor  # [4k², h, w]
    rpn_obj: Tensor  # [2A, h, w]
    rpn_deltas: Tensor  # [4A, h, w]

    @property
    def map_size(self) -> tuple:
        return self.psmaps.shape[1:]


@dataclass
class Checkpoint:
    params: dict
    config: ModelConfig
    iteration: int = 0
    extra: dict = field(default_factory=dict)


def param_shapes(config: ModelConfig) -> dict:
    shapes = {}
    cin = 3
    for i, w in enumerate(config.widths):
        shapes[f"conv{i + 1}.w"] = (w, cin, 3, 3)
        shapes[f"conv{i + 1}.b"] = (w,)
        cin = w
    r = config.reduce_channels
    shapes["reduce.w"] = (r, cin, 1, 1)
    shapes["reduce.b"] = (r,)
    shapes["psmap.w"] = (config.ps_channels, r, 1, 1)
    shapes["psmap.b"] = (config.ps_channels,)
    shapes["bbox.w"] = (config.bbox_channels, r, 1, 1)
    shapes["bbox.b"] = (config.bbox_channels,)
    pen = config.widths[4]
    a = config.num_anchors
    shapes["rpn_conv.w"] = (config.rpn_channels, pen, 3, 3)
    shapes["rpn_conv.b"] = (config.rpn_channels,)
    shapes["rpn_obj.w"] = (2 * a, config.rpn_channels, 1, 1)
    shapes["rpn_obj.b"] = (2 * a,)
    shapes["rpn_delta.w"] = (4 * a, config.rpn_channels, 1, 1)
    shapes["rpn_delta.b"] = (4 * a,)
    return shapes


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> dict:
    """He-normal conv weights (std sqrt(2 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            arr = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        params[name] = Tensor(arr, dtype=dtype)
    return params


class _Counter:
    def __init__(self):
        self.forwards = 0


stats = _Counter()


def forward_backbone(image, params: dict, config: ModelConfig) -> ScoreMapSet:
    x = image if isinstance(image, Tensor) else Tensor(image, dtype=params["conv1.w"].dtype)
    _, H, W = x.shape
    if H % config.stride or W % config.stride:
        raise ValueError(f"image size {H}x{W} is not divisible by stride {config.stride}")
    stats.forwards += 1
    penultimate = None
    for i, s in enumerate(config.stage_strides()):
        d = config.dilation if i == 5 else 1
        x = relu(conv2d(x, params[f"conv{i + 1}.w"], params[f"conv{i + 1}.b"], stride=s, dilation=d, pad=d))
        if i == 4:
            penultimate = x
    feat = relu(conv2d(x, params["reduce.w"], params["reduce.b"]))
    psmaps = conv2d(feat, params["psmap.w"], params["psmap.b"])
    bbox_maps = conv2d(feat, params["bbox.w"], params["bbox.b"])
    r = relu(conv2d(penultimate, params["rpn_conv.w"], params["rpn_conv.b"], pad=1))
    rpn_obj = conv2d(r, params["rpn_obj.w"], params["rpn_obj.b"])
    rpn_deltas = conv2d(r, params["rpn_delta.w"], params["rpn_delta.b"])
    return ScoreMapSet(psmaps, bbox_maps, rpn_obj, rpn_deltas)


# ----------------------------------------------------------------------------
# checkpoint file: "FCCK", u32 version, u32 iteration, u32-length-prefixed
# UTF-8 config text, then records (u16 name length, name, FCT1 tensor)

CKPT_MAGIC = b"FCCK"
CKPT_VERSION = 1


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, ckpt.iteration))
    text = cfgmod.format_kv(ckpt.config).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    for name, t in ckpt.params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        write_tensor(buf, t)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path, config: ModelConfig | None = None, dtype=np.float32) -> Checkpoint:
    """Read a checkpoint; shapes are validated against ``config`` (or the stored one)."""
    with open(path, "rb") as f:
        raw = f.read()
    buf = io.BytesIO(raw)

    def need(n, what):
        pos = buf.tell()
        b = buf.read(n)
        if len(b) != n:
            raise ValueError(f"{path}: truncated checkpoint reading {what} at byte offset {pos}")
        return b

    if need(4, "magic") != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, iteration = struct.unpack("<II", need(8, "header"))
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", need(4, "config length"))
    stored = cfgmod.build(ModelConfig, cfgmod.parse_kv_text(need(n, "config").decode("utf-8"), str(path)))
    params = {}
    while buf.tell() < len(raw):
        (ln,) = struct.unpack("<H", need(2, "name length"))
        name = need(ln, "name").decode("utf-8")
        try:
            params[name] = read_tensor(buf, dtype=dtype)
        except ValueError as e:
            raise ValueError(f"{path}: tensor {name!r}: {e}") from None
    cfg = config or stored
    expected = param_shapes(cfg)
    for name, shape in expected.items():
        if name not in params:
            raise ValueError(f"{path}: missing tensor {name!r}")
        if params[name].shape != shape:
            raise ValueError(f"{path}: tensor {name!r} has shape {params[name].shape}, config expects {shape}")
    extra = set(params) - set(expected)
    if extra:
        raise ValueError(f"{path}: unexpected tensor(s) {sorted(extra)}")
    return Checkpoint(params=params, config=cfg, iteration=iteration)
