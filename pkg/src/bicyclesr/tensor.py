"""Minimal reverse-mode autodiff engine over NCHW float arrays.

Every operation builds a node graph on the fly; `backward` walks the graph in
reverse topological order and fills the `grad` buffer of every leaf that has
`requires_grad` set. Forward/backward default to float32; constructing tensors
from float64 data keeps float64 end to end, which the finite-difference test
oracles rely on.
"""

from __future__ import annotations

import itertools
from typing import Optional, Sequence, Tuple, Union

import numpy as np

Scalar = Union[int, float]

_grad_enabled = True
_id_counter = itertools.count()


class no_grad:
    """Context manager that disables graph construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class OpRecord:
    __slots__ = ("op", "input_ids", "output_id")

    def __init__(self, op: str, input_ids: Tuple[int, ...], output_id: int):
        self.op = op
        self.input_ids = input_ids
        self.output_id = output_id

    def __repr__(self):
        return f"OpRecord({self.op}, in={self.input_ids}, out={self.output_id})"


_active_tape: Optional["Tape"] = None


class Tape:
    """Ordered record of the operations executed while the tape is active.

    The record is an audit surface (ablation tests count nodes by op name);
    gradient propagation itself uses the parent links stored on tensors.
    """

    def __init__(self):
        self.records: list[OpRecord] = []

    def __len__(self):
        return len(self.records)

    def ops(self) -> list[str]:
        return [r.op for r in self.records]

    def count(self, op: str) -> int:
        return sum(1 for r in self.records if r.op == op)

    def __enter__(self):
        global _active_tape
        self._prev = _active_tape
        _active_tape = self
        return self

    def __exit__(self, *exc):
        global _active_tape
        _active_tape = self._prev
        return False


class Tensor:
    __slots__ = ("data", "_requires_grad", "_needs", "grad", "_parents", "_backward", "_op", "_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self._requires_grad = bool(requires_grad)
        # does any requires_grad leaf feed this tensor? (transitive; lets the
        # backward pass prune subgraphs that cannot reach a gradient)
        self._needs = self._requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple[Tensor, ...] = ()
        self._backward = None
        self._op: Optional[str] = None
        self._id = next(_id_counter)

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @requires_grad.setter
    def requires_grad(self, value: bool):
        self._requires_grad = bool(value)
        if not self._parents:
            self._needs = self._requires_grad

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op})"

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64 if isinstance(x, float) else None))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled:
        if any(p._needs for p in parents):
            out._parents = tuple(parents)
            out._backward = backward
            out._needs = True
        out._op = op
        if _active_tape is not None:
            _active_tape.records.append(OpRecord(op, tuple(p._id for p in parents), out._id))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic -----------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bwd, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def bwd(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bwd, "div")


# -- elementwise nonlinearities -------------------------------------------


def relu(x: Tensor) -> Tensor:
    # gradient at exactly 0 is 0 (subgradient choice)
    mask = x.data > 0
    out = np.where(mask, x.data, 0)

    def bwd(g):
        return (g * mask,)

    return _make(out, (x,), bwd, "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, x.data * slope)

    def bwd(g):
        return (np.where(mask, g, g * slope),)

    return _make(out, (x,), bwd, "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), bwd, "sigmoid")


def absolute(x: Tensor) -> Tensor:
    out = np.abs(x.data)

    def bwd(g):
        return (g * np.sign(x.data),)

    return _make(out, (x,), bwd, "abs")


def square(x: Tensor) -> Tensor:
    out = x.data * x.data

    def bwd(g):
        return (g * 2.0 * x.data,)

    return _make(out, (x,), bwd, "square")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def bwd(g):
        # subgradient 0 at the x == 0 kink keeps losses finite at their minima
        denom = 2.0 * out
        return (np.where(denom > 0, g / np.where(denom > 0, denom, 1.0), 0.0),)

    return _make(out, (x,), bwd, "sqrt")


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def bwd(g):
        return (g / x.data,)

    return _make(out, (x,), bwd, "log")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)

    def bwd(g):
        return (g * mask,)

    return _make(out, (x,), bwd, "clamp")


# -- reductions -----------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),)

    return _make(out, (x,), bwd, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))

    def bwd(g):
        g = np.asarray(g) / count
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),)

    return _make(out, (x,), bwd, "mean")


# -- structural ops -------------------------------------------------------


def slice_hw(x: Tensor, hs: int, he: int, ws: int, we: int) -> Tensor:
    """Spatial crop x[:, :, hs:he, ws:we] of an NCHW tensor."""
    if x.data.ndim != 4:
        raise ValueError(f"slice_hw expects an NCHW tensor, got shape {x.shape}")
    out = x.data[:, :, hs:he, ws:we]

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, :, hs:he, ws:we] = g
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), bwd, "slice_hw")


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), bwd, "reshape")


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange (N, C*r*r, H, W) into (N, C, r*H, r*W)."""
    if x.data.ndim != 4:
        raise ValueError(f"pixel_shuffle expects an NCHW tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    if c % (r * r) != 0:
        raise ValueError(f"pixel_shuffle: channels {c} not divisible by r^2 = {r * r}")
    oc = c // (r * r)
    out = (
        x.data.reshape(n, oc, r, r, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, oc, h * r, w * r)
    )

    def bwd(g):
        gx = (
            g.reshape(n, oc, h, r, w, r)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, c, h, w)
        )
        return (np.ascontiguousarray(gx),)

    return _make(np.ascontiguousarray(out), (x,), bwd, "pixel_shuffle")


def _im2col(xdata: np.ndarray, kh: int, kw: int, stride: int, pad_t: int, pad_b: int, pad_l: int, pad_r: int):
    """Extract a (Cin*kh*kw, N*Ho*Wo) patch matrix from a zero-padded NCHW
    array. Channel-major, batch folded into the GEMM width, so the whole
    convolution is a single well-shaped sgemm."""
    n, cin, h, w = xdata.shape
    hp, wp = h + pad_t + pad_b, w + pad_l + pad_r
    if pad_t or pad_b or pad_l or pad_r:
        xp = np.zeros((n, cin, hp, wp), dtype=xdata.dtype)
        xp[:, :, pad_t : pad_t + h, pad_l : pad_l + w] = xdata
    else:
        xp = xdata
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (N, Cin, Ho, Wo, kh, kw)
    # rows are padded by a few elements so the row stride is not an exact
    # multiple of the page size; perfectly page-aligned strides trigger heavy
    # cache-set aliasing in the sgemm packing loops (~2x slowdown)
    k_total, np_total = cin * kh * kw, n * ho * wo
    buf = np.empty((k_total, np_total + 8), dtype=xdata.dtype)
    it = buf.itemsize
    rs = (np_total + 8) * it
    dst = np.lib.stride_tricks.as_strided(
        buf,
        shape=(cin, kh, kw, n, ho, wo),
        strides=(kh * kw * rs, kw * rs, rs, ho * wo * it, wo * it, it),
    )
    np.copyto(dst, windows.transpose(1, 4, 5, 0, 2, 3))
    cols = buf[:, :np_total]
    return cols, ho, wo


def _corr2d_raw(xdata: np.ndarray, wdata: np.ndarray, stride: int, padding: int):
    """Raw correlation forward; returns (out NCHW, cols) with cols kept for the
    weight gradient."""
    n = xdata.shape[0]
    cout, cin, kh, kw = wdata.shape
    cols, ho, wo = _im2col(xdata, kh, kw, stride, padding, padding, padding, padding)
    # transposed orientation (tall-by-narrow) runs measurably faster here
    out = cols.T @ wdata.reshape(cout, cin * kh * kw).T  # (N*Ho*Wo, Cout)
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    return out, cols, ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) over an NCHW batch, zero padding."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(
            f"conv2d expects NCHW input and OIHW weight, got {x.shape} and {weight.shape}"
        )
    n, cin, h, w = x.shape
    cout, win, kh, kw = weight.shape
    if cin != win:
        raise ValueError(
            f"conv2d channel mismatch: input shape {x.shape} has {cin} channels, "
            f"weight shape {weight.shape} expects {win}"
        )
    if stride < 1:
        raise ValueError(f"conv2d stride must be positive, got {stride}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ValueError(
            f"conv2d: padded input {hp}x{wp} smaller than kernel {kh}x{kw}"
        )
    out, cols, ho, wo = _corr2d_raw(x.data, weight.data, stride, padding)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)
    need_gx = x._needs
    need_gw = weight._needs

    def bwd(g):
        gw = None
        if need_gw:
            g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, n * ho * wo)
            gw = np.ascontiguousarray((cols @ g2.T).T).reshape(weight.shape)
        gx = None
        if need_gx:
            # input gradient = full correlation of the stride-dilated output
            # grad with the spatially flipped, channel-transposed kernel
            if stride > 1:
                gd = np.zeros(
                    (n, cout, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=g.dtype
                )
                gd[:, :, ::stride, ::stride] = g
            else:
                gd = np.ascontiguousarray(g)
            rh = hp - ((ho - 1) * stride + kh)  # padded columns the kernel never reached
            rw = wp - ((wo - 1) * stride + kw)
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gcols, gh, gw_ = _im2col(gd, kh, kw, 1, kh - 1, kh - 1 + rh, kw - 1, kw - 1 + rw)
            gxp = gcols.T @ wflip.reshape(cin, cout * kh * kw).T  # (N*gh*gw, Cin)
            gxp = np.ascontiguousarray(gxp.reshape(n, gh, gw_, cin).transpose(0, 3, 1, 2))
            gx = gxp[:, :, padding : padding + h, padding : padding + w]
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3)).reshape(bias.shape)
        return gx, gw, gb

    return _make(out, parents, bwd, "conv2d")


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling; spatial dims must divide by k."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"maxpool2d: spatial size {h}x{w} not divisible by {k}")
    ho, wo = h // k, w // k
    tiles = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, ho, wo, k * k
    )
    idx = tiles.argmax(axis=-1)
    out = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gt = np.zeros((n, c, ho, wo, k * k), dtype=x.dtype)
        np.put_along_axis(gt, idx[..., None], g[..., None], axis=-1)
        gx = gt.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (np.ascontiguousarray(gx),)

    return _make(np.ascontiguousarray(out), (x,), bwd, "maxpool2d")


def _resize_weights(in_size: int, out_size: int, dtype):
    """Align-corners-false bilinear sample positions and weights."""
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0, in_size - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = (src - i0).astype(dtype)
    return i0, i1, frac


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling (align_corners=False), differentiable in x."""
    if x.data.ndim != 4:
        raise ValueError(f"bilinear_resize expects an NCHW tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    if h < 1 or w < 1 or out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize: degenerate size {h}x{w} -> {out_h}x{out_w}")
    y0, y1, fy = _resize_weights(h, out_h, x.dtype)
    x0, x1, fx = _resize_weights(w, out_w, x.dtype)
    fy = fy[:, None]
    fx = fx[None, :]
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx

    d = x.data
    out = (
        d[:, :, y0[:, None], x0[None, :]] * w00
        + d[:, :, y0[:, None], x1[None, :]] * w01
        + d[:, :, y1[:, None], x0[None, :]] * w10
        + d[:, :, y1[:, None], x1[None, :]] * w11
    )

    def bwd(g):
        gx = np.zeros_like(x.data)
        for yy, xx, ww in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
            np.add.at(gx, (slice(None), slice(None), yy[:, None], xx[None, :]), g * ww)
        return (gx,)

    return _make(np.ascontiguousarray(out.astype(x.dtype, copy=False)), (x,), bwd, "bilinear_resize")


# -- backward pass --------------------------------------------------------


def backward(loss: Tensor, accumulate: bool = False):
    """Populate `grad` on every requires_grad leaf reachable from `loss`.

    With accumulate=False (default) leaf grads are overwritten; with True new
    gradients add onto whatever is already stored.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if node._id in seen:
            continue
        seen.add(node._id)
        stack.append((node, True))
        for p in node._parents:
            if p._id not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node.requires_grad:
            if accumulate and node.grad is not None:
                node.grad = node.grad + g
            else:
                node.grad = g.copy() if node._backward else g
        if node._backward is not None:
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p._needs:
                    continue
                if p._id in grads:
                    grads[p._id] = grads[p._id] + pg
                else:
                    grads[p._id] = pg
