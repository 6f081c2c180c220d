"""Minimal tensor container and reverse-mode tape.

Tensors wrap a read-only numpy array. Kernels in this module compute their
result eagerly and, when a :class:`Tape` is active and one of the inputs is
tracked by it, append a backward closure to the tape. :func:`backprop`
replays the tape in reverse.

Only the kernels the FCIS graph needs are provided; there is no general
broadcasting.
"""

from __future__ import annotations

import os
import struct
import threading
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

DEBUG = bool(os.environ.get("FCIS_DEBUG"))

_state = threading.local()


class Tensor:
    """Immutable n-d float array (32 or 64 bit, row-major)."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=np.float64):
        arr = np.array(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            raise TypeError(f"unsupported dtype {arr.dtype}")
        self.data = _freeze(arr)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = _freeze(arr)
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))


def _scalar_error(t):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def _freeze(arr: np.ndarray) -> np.ndarray:
    if not isinstance(arr, np.ndarray):
        arr = np.asarray(arr)
    if DEBUG and not np.all(np.isfinite(arr)):
        raise FloatingPointError("non-finite value in tensor")
    arr.flags.writeable = False
    return arr


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype or np.float64)


class Tape:
    """Ordered record of executed kernels.

    Use as a context manager; kernels run inside the ``with`` block are
    recorded if any of their inputs is watched or was produced by a recorded
    kernel.
    """

    def __init__(self):
        self._nodes = []
        self._tracked = set()
        self._watched = []

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if id(t) not in self._tracked:
                self._tracked.add(id(t))
                self._watched.append(t)

    def tracks(self, t) -> bool:
        return isinstance(t, Tensor) and id(t) in self._tracked

    def record(self, out: Tensor, inputs, backward) -> None:
        self._tracked.add(id(out))
        self._nodes.append((out, inputs, backward))

    def __len__(self):
        return len(self._nodes)

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False


def active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def emit(out: np.ndarray, inputs, backward) -> Tensor:
    t = Tensor._wrap(out)
    tape = active_tape()
    if tape is not None and any(tape.tracks(x) for x in inputs):
        tape.record(t, inputs, backward)
    return t


def backprop(tape: Tape, loss: Tensor) -> dict:
    """Gradients of a scalar ``loss`` w.r.t. every watched tensor.

    Returns a dict keyed by the watched Tensor objects. Watched tensors the
    loss does not depend on get zero gradients.
    """
    if not tape.tracks(loss):
        raise ValueError("loss was not produced on this tape")
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for out, inputs, fn in reversed(tape._nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for x, gx in zip(inputs, fn(g)):
            if gx is None or not tape.tracks(x):
                continue
            k = id(x)
            if k in grads:
                grads[k] = grads[k] + gx
            else:
                grads[k] = gx
    return {t: grads.get(id(t), np.zeros_like(t.data)) for t in tape._watched}


# ----------------------------------------------------------------------------
# elementwise kernels


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    x, y = a.data, b.data
    return emit(x * y, (a, b), lambda g: (g * y, g * x))


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    return emit(a.data * s, (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return emit(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return emit(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return emit(np.log(x), (a,), lambda g: (g / x,))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    _check_same(a, b, "maximum")
    first = a.data >= b.data
    return emit(np.where(first, a.data, b.data), (a, b), lambda g: (g * first, g * ~first))


def smooth_l1(a: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style loss with transition at ``beta``."""
    x = a.data
    ax = np.abs(x)
    small = ax < beta
    out = np.where(small, 0.5 * x * x / beta, ax - 0.5 * beta).astype(a.dtype)
    return emit(out, (a,), lambda g: (g * np.where(small, x / beta, np.sign(x)),))


def softmax(a: Tensor, axis: int = 0) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return emit(p, (a,), back)


def log_softmax(a: Tensor, axis: int = 0) -> Tensor:
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return emit(out, (a,), back)


# ----------------------------------------------------------------------------
# shape and reduction kernels


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return emit(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def total(a: Tensor, axis=None) -> Tensor:
    """Sum over ``axis`` (all axes when None)."""
    src = a.shape
    out = a.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, src).astype(a.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return emit(np.asarray(out, dtype=a.dtype), (a,), back)


def select(a: Tensor, i: int) -> Tensor:
    """``a[i]`` along the leading axis."""

    def back(g):
        grad = np.zeros_like(a.data)
        grad[i] = g
        return (grad,)

    return emit(a.data[i].copy(), (a,), back)


def gather(a: Tensor, flat_index) -> Tensor:
    """``a.ravel()[flat_index]``; repeated indices accumulate in backward."""
    idx = np.asarray(flat_index, dtype=np.int64)
    n = a.size

    def back(g):
        grad = np.bincount(idx.ravel(), weights=g.ravel(), minlength=n)
        return (grad.astype(a.dtype).reshape(a.shape),)

    return emit(a.data.reshape(-1)[idx], (a,), back)


def _segment_index(rows: int, seg: np.ndarray, n: int) -> np.ndarray:
    return (np.arange(rows, dtype=np.int64)[:, None] * n + seg[None, :]).ravel()


def segment_sum(a: Tensor, segments, n: int) -> Tensor:
    """Sum the last axis of ``a`` into ``n`` buckets given by ``segments``."""
    seg = np.asarray(segments, dtype=np.int64)
    lead = a.shape[:-1]
    rows = int(np.prod(lead, dtype=np.int64))
    flat = a.data.reshape(rows, -1)
    if flat.shape[1] != seg.size:
        raise ValueError(f"segment_sum: last axis {flat.shape[1]} != {seg.size} segment ids")
    idx = _segment_index(rows, seg, n)
    out = np.bincount(idx, weights=flat.ravel(), minlength=rows * n)
    out = out.astype(a.dtype).reshape(lead + (n,))
    return emit(out, (a,), lambda g: (g[..., seg],))


def segment_mean(a: Tensor, segments, n: int) -> Tensor:
    """Masked average pooling over the last axis; empty buckets give 0."""
    seg = np.asarray(segments, dtype=np.int64)
    counts = np.bincount(seg, minlength=n).astype(a.dtype)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0).astype(a.dtype)
    s = segment_sum(a, seg, n)
    w = Tensor._wrap(np.broadcast_to(inv, s.shape).copy())
    return mul(s, w)


# ----------------------------------------------------------------------------
# convolution and resampling


def conv_out_size(size: int, k: int, stride: int, dilation: int, pad: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, dilation: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation of a single image ``x[C_in, H, W]``."""
    if x.data.ndim != 3:
        raise ValueError(f"conv2d: input must be [C,H,W], got shape {x.shape}")
    if w.data.ndim != 4:
        raise ValueError(f"conv2d: weight must be [C_out,C_in,kh,kw], got shape {w.shape}")
    cin, H, W = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ValueError(f"conv2d: channel axis mismatch, input has {cin}, weight expects {wcin}")
    if b.shape != (cout,):
        raise ValueError(f"conv2d: bias axis 0 is {b.shape}, expected ({cout},)")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel height/width must be odd, got {kh}x{kw}")
    if stride < 1 or dilation < 1 or pad < 0:
        raise ValueError("conv2d: stride and dilation must be >= 1, pad >= 0")
    Ho = conv_out_size(H, kh, stride, dilation, pad)
    Wo = conv_out_size(W, kw, stride, dilation, pad)
    if Ho < 1:
        raise ValueError(f"conv2d: height axis too small ({H}) for kernel/dilation")
    if Wo < 1:
        raise ValueError(f"conv2d: width axis too small ({W}) for kernel/dilation")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(cin, kh, kw, Ho, Wo),
        strides=(sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False,
    )
    cols = win.reshape(cin * kh * kw, Ho * Wo)
    wmat = w.data.reshape(cout, -1)
    out = (wmat @ cols + b.data[:, None]).reshape(cout, Ho, Wo)

    def back(g):
        gm = g.reshape(cout, -1)
        gw = (gm @ cols.T).reshape(w.shape)
        gb = gm.sum(axis=1)
        dcols = (wmat.T @ gm).reshape(cin, kh, kw, Ho, Wo)
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        hspan = stride * (Ho - 1) + 1
        wspan = stride * (Wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                y0, x0 = i * dilation, j * dilation
                gxp[:, y0:y0 + hspan:stride, x0:x0 + wspan:stride] += dcols[:, i, j]
        gx = gxp[:, pad:pad + H, pad:pad + W] if pad else gxp
        return (gx, gw, gb)

    return emit(out, (x, w, b), back)


@lru_cache(maxsize=256)
def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i holds the linear-interpolation weights for output sample i.

    Pixel-center convention (align_corners=False), source coordinate clamped
    to the valid range.
    """
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    m.flags.writeable = False
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.data.ndim != 3:
        raise ValueError(f"bilinear_resize: input must be [C,H,W], got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize: output size must be >= 1, got {out_h}x{out_w}")
    _, H, W = x.shape
    ry = interp_matrix(H, out_h).astype(x.dtype)
    rx = interp_matrix(W, out_w).astype(x.dtype)
    out = ry @ x.data @ rx.T
    return emit(out, (x,), lambda g: (ry.T @ g @ rx,))


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class SgdState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    buffers: dict = field(default_factory=dict)


def sgd_step(params: dict, grads: dict, state: SgdState) -> dict:
    """One momentum-SGD update; returns a new name -> Tensor dict.

    v <- momentum * v + g + weight_decay * p;  p <- p - lr * v
    """
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"sgd_step: grad for {name} has shape {g.shape}, param {p.shape}")
        v = state.buffers.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v + g + state.weight_decay * p.data
        state.buffers[name] = v.astype(p.dtype)
        out[name] = Tensor._wrap((p.data - state.lr * v).astype(p.dtype))
    return out


# ----------------------------------------------------------------------------
# binary format: "FCT1", u8 rank, rank x u32 LE dims, float32 LE values

TENSOR_MAGIC = b"FCT1"


def write_tensor(fp, t) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.ndim > 255:
        raise ValueError("rank too large for FCT1")
    fp.write(TENSOR_MAGIC)
    fp.write(struct.pack("<B", arr.ndim))
    fp.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fp.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fp, n: int, what: str) -> bytes:
    pos = fp.tell() if fp.seekable() else -1
    buf = fp.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated FCT1 data reading {what} at byte offset {pos}")
    return buf


def read_tensor(fp, dtype=np.float32) -> Tensor:
    pos = fp.tell() if fp.seekable() else -1
    magic = fp.read(4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r} at byte offset {pos}")
    (rank,) = struct.unpack("<B", _read_exact(fp, 1, "rank"))
    dims = struct.unpack(f"<{rank}I", _read_exact(fp, 4 * rank, "dims"))
    count = int(np.prod(dims, dtype=np.int64))
    raw = _read_exact(fp, 4 * count, "values")
    arr = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(dtype)
    return Tensor._wrap(arr)
