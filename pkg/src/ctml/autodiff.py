"""Minimal tape-based reverse-mode differentiation over numpy arrays.

Operations executed inside ``with Tape():`` are recorded whenever one of
their inputs requires a gradient; :func:`backward` sweeps the tape in
reverse and leaves the result in ``leaf.grad``.

The engine computes in single precision by default (training); wrap code
in ``with precision("double"):`` for gradient checks.
"""

from __future__ import annotations

import json
import struct
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import projector
from .errors import DimensionError, FormatError, TruncatedFileError, UsageError
from .geometry import ScanGeometry

_PRECISIONS = {"single": np.float32, "double": np.float64}
_dtype = np.float32


def get_dtype():
    return _dtype


def set_precision(name: str):
    global _dtype
    if name not in _PRECISIONS:
        raise UsageError(f"precision must be one of {sorted(_PRECISIONS)}, got {name!r}")
    _dtype = _PRECISIONS[name]


@contextmanager
def precision(name: str):
    previous = _dtype
    set_precision(name)
    try:
        yield
    finally:
        globals()["_dtype"] = previous


class Tensor:
    """Dense array plus autodiff bookkeeping.

    ``node_id`` is the index of the producing record on ``tape``; leaves have
    ``node_id is None``.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=_dtype)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.tape: Optional["Tape"] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered list of recorded operations (topological by construction)."""

    _stack: List["Tape"] = []

    def __init__(self):
        self.records: List[_Record] = []

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    @classmethod
    def active(cls) -> Optional["Tape"]:
        return cls._stack[-1] if cls._stack else None


def _record(data, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    tape = Tape.active()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node_id = len(tape.records)
        out.tape = tape
        tape.records.append(_Record(tuple(inputs), out, backward))
    return out


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Every requires-grad leaf on the tape gets a fresh ``.grad`` (zeros when
    the loss does not depend on it). Returns ``{leaf: grad}``.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None or loss.node_id is None:
        raise UsageError("loss was not recorded on a tape")
    records = loss.tape.records[: loss.node_id + 1]
    leaves: Dict[int, Tensor] = {}
    for rec in records:
        for t in rec.inputs:
            if t.requires_grad and t.tape is None:
                leaves[id(t)] = t
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            k = id(t)
            grads[k] = grads[k] + gi if k in grads else gi
    result = {}
    for k, leaf in leaves.items():
        g = grads.get(k)
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.data.dtype)
        result[leaf] = leaf.grad
    return result


# -- elementwise -------------------------------------------------------------

def _same_shape(x: Tensor, y: Tensor, op: str):
    if x.shape != y.shape:
        raise DimensionError(f"{op}: shapes {x.shape} and {y.shape} differ")


def add(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _same_shape(x, y, "add")
    return _record(x.data + y.data, (x, y), lambda g: (g, g))


def sub(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _same_shape(x, y, "sub")
    return _record(x.data - y.data, (x, y), lambda g: (g, -g))


def mul(x, y) -> Tensor:
    """Elementwise product; a plain number scales."""
    x = as_tensor(x)
    if np.isscalar(y):
        a = float(y)
        return _record(x.data * a, (x,), lambda g: (g * a,))
    y = as_tensor(y)
    _same_shape(x, y, "mul")
    xd, yd = x.data, y.data
    return _record(xd * yd, (x, y), lambda g: (g * yd, g * xd))


def scale_shift(x, a: float, b: float) -> Tensor:
    """``a * x + b`` with constant scalars (input normalisation)."""
    x = as_tensor(x)
    a = float(a)
    return _record(x.data * a + b, (x,), lambda g: (g * a,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    shape, dt = x.shape, x.data.dtype
    return _record(np.asarray(x.data.sum(), dtype=dt), (x,), lambda g: (np.full(shape, g, dtype=dt),))


# -- channel plumbing --------------------------------------------------------

def concat_channels(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    if x.ndim != 4 or y.ndim != 4 or x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
        raise DimensionError(f"concat_channels: incompatible shapes {x.shape} and {y.shape}")
    cx = x.shape[1]
    return _record(np.concatenate([x.data, y.data], axis=1), (x, y),
                   lambda g: (g[:, :cx], g[:, cx:]))


def slice_channels(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return _record(x.data[:, start:stop].copy(), (x,), bw)


def downsample2(x) -> Tensor:
    """2x2 average pooling."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"downsample2 needs even spatial size, got {(h, w)}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _record(out, (x,), bw)


def upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record(out, (x,), bw)


# -- convolution -------------------------------------------------------------

def _pad_nhwc(x: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), mode="reflect" if mode == "reflect" else "constant")


def _unpad_nhwc(g: np.ndarray, p: int, mode: str) -> np.ndarray:
    """Adjoint of :func:`_pad_nhwc`: fold padded borders back onto the core."""
    if p == 0:
        return g
    h, w = g.shape[1] - 2 * p, g.shape[2] - 2 * p
    if mode != "reflect":
        return g[:, p:p + h, p:p + w]
    rows = g[:, p:p + h].copy()
    for k in range(p):
        rows[:, p - k] += g[:, k]
        rows[:, h - 2 - k] += g[:, p + h + k]
    core = rows[:, :, p:p + w].copy()
    for k in range(p):
        core[:, :, p - k] += rows[:, :, k]
        core[:, :, w - 2 - k] += rows[:, :, p + w + k]
    return core


def _conv_flat(x, weight, bias, xp, n, ho, wo):
    """Stride-1 correlation as shifted matmuls on the flattened padded input.

    Output position ``i`` of the flat padded grid reads input rows
    ``i + u * wp + v``; positions falling in the padding columns/rows are
    computed and discarded. Avoids building an im2col matrix, which wins
    when channels are few and images large.
    """
    co, c, kh, kw = weight.shape
    hp, wp = xp.shape[1:3]
    span = (kh - 1) * wp + (kw - 1)
    total = n * hp * wp
    length = total - span
    xf = xp.reshape(total, c)
    wk = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0))  # (kh, kw, c, co)
    wkt = np.ascontiguousarray(wk.transpose(0, 1, 3, 2))
    out = xf[:length] @ wk[0, 0]
    for u in range(kh):
        for v in range(kw):
            if u or v:
                s = u * wp + v
                out += xf[s:s + length] @ wk[u, v]
    if bias is not None:
        out += bias.data
    full = np.zeros((total, co), dtype=out.dtype)
    full[:length] = out
    y = full.reshape(n, hp, wp, co)[:, :ho, :wo]

    def bw(g):
        gfull = np.zeros((n, hp, wp, co), dtype=g.dtype)
        gfull[:, :ho, :wo] = g.transpose(0, 2, 3, 1)
        gm = gfull.reshape(total, co)[:length]
        gx = gw = gb = None
        if weight.requires_grad:
            gwk = np.empty((kh, kw, c, co), dtype=g.dtype)
            for u in range(kh):
                for v in range(kw):
                    s = u * wp + v
                    gwk[u, v] = xf[s:s + length].T @ gm
            gw = gwk.transpose(3, 2, 0, 1)
        if bias is not None and bias.requires_grad:
            gb = np.ones(length, dtype=gm.dtype) @ gm
        if x.requires_grad:
            gxf = np.zeros((total, c), dtype=g.dtype)
            for u in range(kh):
                for v in range(kw):
                    s = u * wp + v
                    gxf[s:s + length] += gm @ wkt[u, v]
            gx = gxf.reshape(n, hp, wp, c)
        return gx, gw, gb

    return y, bw


def _conv_im2col(x, weight, bias, xp, n, ho, wo, stride):
    co, c, kh, kw = weight.shape
    hp, wp = xp.shape[1:3]
    # channels-last columns ordered (kh, kw, c): contiguous copies in both directions
    if kh == 1 and kw == 1 and stride == 1:
        cols = xp.reshape(n * ho * wo, c)
    else:
        cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
        for u in range(kh):
            for v in range(kw):
                cols[:, :, :, u, v, :] = xp[:, u:u + stride * ho:stride, v:v + stride * wo:stride, :]
        cols = cols.reshape(n * ho * wo, kh * kw * c)
    wm = weight.data.transpose(0, 2, 3, 1).reshape(co, -1)
    out = cols @ wm.T
    if bias is not None:
        out += bias.data
    y = out.reshape(n, ho, wo, co)

    def bw(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, co)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (gm.T @ cols).reshape(co, kh, kw, c).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = np.ones(gm.shape[0], dtype=gm.dtype) @ gm
        if x.requires_grad:
            dcols = (gm @ wm).reshape(n, ho, wo, kh, kw, c)
            gx = np.zeros((n, hp, wp, c), dtype=g.dtype)
            for u in range(kh):
                for v in range(kw):
                    gx[:, u:u + stride * ho:stride, v:v + stride * wo:stride, :] += dcols[:, :, :, u, v, :]
        return gx, gw, gb

    return y, bw


# shifted matmuls beat im2col unless the image is small relative to the channel count
FLAT_CONV_PIXELS_PER_CHANNEL = 8


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, padding_mode: str = "reflect") -> Tensor:
    """2-D cross-correlation over NCHW input with OIHW weights."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {ci}")
    if padding_mode not in ("reflect", "zeros"):
        raise UsageError(f"unknown padding_mode {padding_mode!r}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (co,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} != ({co},)")
    xp = _pad_nhwc(x.data.transpose(0, 2, 3, 1), padding, padding_mode)
    hp, wp = xp.shape[1:3]
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    flat = stride == 1 and kh * kw > 1 and ho * wo >= FLAT_CONV_PIXELS_PER_CHANNEL * c
    if flat:
        y, inner = _conv_flat(x, weight, bias, xp, n, ho, wo)
    else:
        y, inner = _conv_im2col(x, weight, bias, xp, n, ho, wo, stride)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gxp, gw, gb = inner(g)
        gx = None if gxp is None else _unpad_nhwc(gxp, padding, padding_mode).transpose(0, 3, 1, 2)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _record(np.ascontiguousarray(y.transpose(0, 3, 1, 2)), inputs, bw)


# -- losses ------------------------------------------------------------------

def mse_loss(x, y) -> Tensor:
    """Mean over all elements of ``(x - y)**2``."""
    x, y = as_tensor(x), as_tensor(y)
    _same_shape(x, y, "mse_loss")
    diff = x.data - y.data
    scale = 2.0 / diff.size
    dt = diff.dtype

    def bw(g):
        gx = (g * scale) * diff
        return (gx, -gx)

    return _record(np.asarray(np.mean(diff * diff), dtype=dt), (x, y), bw)


# -- projector layers --------------------------------------------------------

def _check_spatial(x: Tensor, shape, what: str):
    if x.shape[-2:] != tuple(shape):
        raise DimensionError(f"{what}: spatial shape {x.shape[-2:]} does not match geometry {tuple(shape)}")


def fp_layer(mu, geom: ScanGeometry) -> Tensor:
    """Differentiable forward projection (image -> sinogram); backward is ``A^T``."""
    mu = as_tensor(mu)
    _check_spatial(mu, geom.image_shape, "fp_layer")
    dt = mu.data.dtype
    out = projector.project_array(mu.data, geom).astype(dt)
    return _record(out, (mu,), lambda g: (projector.backproject_array(g, geom).astype(dt),))


def fbp_layer(p, geom: ScanGeometry, window: str = projector.DEFAULT_WINDOW) -> Tensor:
    """Differentiable FBP (sinogram -> image); backward is the transposed FBP map."""
    p = as_tensor(p)
    _check_spatial(p, geom.sinogram_shape, "fbp_layer")
    dt = p.data.dtype
    out = projector.fbp_array(p.data, geom, window).astype(dt)
    return _record(out, (p,), lambda g: (projector.fbp_adjoint_array(g, geom, window).astype(dt),))


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"CTPK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: Dict[str, Tensor], meta: Optional[dict] = None):
    """Write parameters as float32 in manifest order (names sorted)."""
    names = sorted(params)
    manifest = {
        "params": [{"name": k, "shape": list(params[k].shape)} for k in names],
        "meta": meta or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for k in names:
            data = params[k].data if isinstance(params[k], Tensor) else np.asarray(params[k])
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns ``({name: float32 array}, meta)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, mlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 12 + mlen:
        raise TruncatedFileError(path, 12 + mlen, len(raw))
    manifest = json.loads(raw[12:12 + mlen].decode("utf-8"))
    offset = 12 + mlen
    expected = sum(4 * int(np.prod(e["shape"], dtype=np.int64)) for e in manifest["params"])
    if len(raw) - offset != expected:
        raise TruncatedFileError(path, expected, len(raw) - offset)
    out = {}
    for e in manifest["params"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        out[e["name"]] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(e["shape"]).copy()
        offset += 4 * count
    return out, manifest.get("meta", {})


def parameters_from(arrays: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}


def flatten(tensors: Iterable[Tensor]) -> np.ndarray:
    return np.concatenate([t.data.ravel() for t in tensors])
