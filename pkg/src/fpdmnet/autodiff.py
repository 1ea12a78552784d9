"""Minimal dense tensor with reverse-mode differentiation.

Only the operations the denoising network and its loss need are provided.
Images use the N x C x H x W layout throughout.
"""
from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

ArrayLike = Union[np.ndarray, float, int, Sequence]

_node_counter = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class UnsupportedKernelError(ValueError):
    """Convolution kernel size is not an odd square."""


class DegenerateBatchError(ValueError):
    """Batch statistics requested over an empty channel."""


def _as_array(data: ArrayLike) -> np.ndarray:
    arr = np.asarray(data)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """N-dimensional array that records the operations producing it.

    ``grad`` is only populated on leaf tensors with ``requires_grad=True``;
    intermediate gradients are discarded once propagated.
    """

    __array_priority__ = 100

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        parents: Tuple["Tensor", ...] = (),
        backward_fn: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None,
        op: str = "leaf",
        name: Optional[str] = None,
    ):
        self.data = _as_array(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.name = name
        self.node_id = next(_node_counter) if parents else None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self, accumulate: bool = False) -> None:
        backward(self, accumulate=accumulate)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    # plain numbers adopt the tensor operand's dtype so float32 graphs stay float32
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(b, Tensor) and isinstance(a, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return as_tensor(a), as_tensor(b)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), backward_fn=backward_fn, op=op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, accumulate: bool = False) -> None:
    """Populate ``grad`` on every leaf reachable from the scalar ``loss``.

    Leaf gradients are overwritten unless ``accumulate`` is set, in which case
    they are added to any existing value.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            if accumulate and node.grad is not None:
                node.grad = node.grad + g
            else:
                node.grad = np.array(g, dtype=node.data.dtype, copy=True)
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise arithmetic and reductions
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    out = a.data ** a.dtype.type(exponent)
    return _make(out, (a,), lambda g: (g * a.dtype.type(exponent) * a.data ** a.dtype.type(exponent - 1.0),), "pow")


def absolute(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def clip_min(a: Tensor, low: float) -> Tensor:
    """max(a, low); gradient is zero where the floor is active."""
    a = as_tensor(a)
    keep = a.data > low
    out = np.where(keep, a.data, low).astype(a.data.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * keep,), "clip_min")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True),)

    return _make(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


# ---------------------------------------------------------------------------
# network layers
# ---------------------------------------------------------------------------


_IM2COL_CHUNK = 2048
_TAPS_CHUNK = 8192


def _padded_flat(x: np.ndarray, p: int) -> Tuple[np.ndarray, int]:
    """Zero-pad by ``p`` and flatten H, W so each kernel tap is a fixed offset.

    One spare row keeps every shifted slice of length ``h * wp`` in bounds.
    """
    n, c, h, wd = x.shape
    wp = wd + 2 * p
    xp = np.zeros((n, c, h + 2 * p + 1, wp), dtype=x.dtype)
    xp[:, :, p:p + h, p:p + wd] = x
    return xp.reshape(n, c, -1), wp


def _im2col_chunks(xf_i: np.ndarray, offsets, length: int, chunk: int):
    """Yield (start, stop, cols) with cols of shape (taps * C, stop - start)."""
    c = xf_i.shape[0]
    buf = np.empty((len(offsets), c, chunk), dtype=xf_i.dtype)
    for a in range(0, length, chunk):
        b = min(a + chunk, length)
        cols = buf[:, :, : b - a]
        for t, s in enumerate(offsets):
            cols[t] = xf_i[:, a + s:b + s]
        yield a, b, cols.reshape(-1, b - a)


def _conv_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' cross-correlation of N x C x H x W with O x C x k x k.

    On the flattened padded grid each tap is a constant offset. Narrow inputs
    use im2col (k*k*C rows); wide inputs compute all k*k tap outputs in one
    GEMM and shift-add them. Both run in cache-sized column chunks.
    """
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    if k == 1:
        out = np.matmul(w[:, :, 0, 0], x.reshape(n, c, h * wd))
        return out.reshape(n, o, h, wd)
    xf, wp = _padded_flat(x, k // 2)
    length = h * wp
    offsets = [di * wp + dj for di in range(k) for dj in range(k)]
    out = np.empty((n, o, length), dtype=np.result_type(x, w))
    if c <= o:
        wmat = w.transpose(0, 2, 3, 1).reshape(o, k * k * c)
        for i in range(n):
            for a, b, cols in _im2col_chunks(xf[i], offsets, length, _IM2COL_CHUNK):
                np.matmul(wmat, cols, out=out[i, :, a:b])
    else:
        taps = w.transpose(2, 3, 0, 1).reshape(k * k * o, c)
        span = offsets[-1]
        buf = np.empty((k * k * o, _TAPS_CHUNK + span), dtype=out.dtype)
        for i in range(n):
            for a in range(0, length, _TAPS_CHUNK):
                b = min(a + _TAPS_CHUNK, length)
                m = b - a
                y = buf[:, : m + span]
                np.matmul(taps, xf[i, :, a:b + span], out=y)
                y = y.reshape(k * k, o, -1)
                acc = out[i, :, a:b]
                np.copyto(acc, y[0, :, :m])
                for t in range(1, k * k):
                    acc += y[t, :, offsets[t]:offsets[t] + m]
    return out.reshape(n, o, h, wp)[:, :, :, :wd]


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    n, c, h, wd = x.shape
    o = g.shape[1]
    if k == 1:
        return np.einsum("nol,ncl->oc", g.reshape(n, o, -1), x.reshape(n, c, -1))[:, :, None, None]
    xf, wp = _padded_flat(x, k // 2)
    gp = np.zeros((n, o, h, wp), dtype=g.dtype)
    gp[:, :, :, :wd] = g
    gf = gp.reshape(n, o, -1)
    length = h * wp
    offsets = [di * wp + dj for di in range(k) for dj in range(k)]
    dw = np.zeros((o, k * k * c), dtype=np.result_type(x, g))
    for i in range(n):
        for a, b, cols in _im2col_chunks(xf[i], offsets, length, _IM2COL_CHUNK):
            dw += gf[i, :, a:b] @ cols.T
    return dw.reshape(o, k, k, c).transpose(0, 3, 1, 2)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Stride-1 convolution with zero 'same' padding; odd square kernels only."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    o, c, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise UnsupportedKernelError(f"kernel must be odd and square, got {kh}x{kw}")
    if x.shape[1] != c:
        raise ShapeError(f"input has {x.shape[1]} channels but weight expects {c}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"bias shape {bias.shape} does not match {o} output channels")

    out = _conv_same(x.data, weight.data)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def bw(g):
        gx = _conv_same(g, weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)) if x.requires_grad else None
        gw = _conv_weight_grad(x.data, g, kh) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv2d")


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties route the gradient to the first
    element in row-major order."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gwin = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        return (gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _make(out, (x,), bw, "maxpool2x2")


def avgpool2x2(x: Tensor) -> Tensor:
    """2x2 mean pooling, stride 2. A trailing odd row/column is dropped."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    crop = x.data[:, :, : 2 * h2, : 2 * w2]
    out = crop.reshape(n, c, h2, 2, w2, 2).mean(axis=(3, 5))

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, : 2 * h2, : 2 * w2] = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return (gx,)

    return _make(out, (x,), bw, "avgpool2x2")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by two in both spatial dims."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _make(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),), "upsample2x")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def dropout(x: Tensor, p: float, mode: str = "train", rng=None) -> Tensor:
    """Inverted dropout. ``rng`` may be a Generator or an integer seed."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if mode == "infer" or p == 0.0:
        return x
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(rng)
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    mask = (rng.random(x.shape) >= p).astype(x.dtype) * scale
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def concat_channels(*tensors: Tensor) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"cannot concatenate {t.shape} with {ref} along channels")
    out = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _make(out, tensors, bw, "concat")


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    eps: float = 1e-5,
    momentum: float = 0.99,
) -> Tensor:
    """Per-channel batch normalisation over N, H, W.

    In train mode the running statistics are updated in place as
    ``r <- momentum * r + (1 - momentum) * batch_stat``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    axes = (0, 2, 3)
    count = x.data.size // c if c else 0
    bshape = (1, c, 1, 1)

    if mode == "train":
        if count == 0:
            raise DegenerateBatchError("batchnorm over an empty channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    elif mode == "infer":
        mu, var = running_mean, running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")

    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape).astype(x.dtype)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if mode == "train":
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                gx = (inv.reshape(bshape) / count) * (count * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv.reshape(bshape)
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw, "batchnorm")


def correlate1d_valid(x: Tensor, kernel: np.ndarray, axis: int) -> Tensor:
    """'Valid' correlation of ``x`` with a fixed 1-D kernel along ``axis``."""
    x = as_tensor(x)
    kernel = np.asarray(kernel, dtype=x.dtype)
    k = kernel.size
    length = x.shape[axis] - k + 1
    if length < 1:
        raise ShapeError(f"axis {axis} of length {x.shape[axis]} is shorter than kernel {k}")
    win = sliding_window_view(x.data, k, axis=axis)
    out = np.ascontiguousarray(win @ kernel)

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        index = [slice(None)] * x.ndim
        for j in range(k):
            index[axis] = slice(j, j + length)
            gx[tuple(index)] += kernel[j] * g
        return (gx,)

    return _make(out, (x,), bw, "correlate1d")


def separable_filter_valid(x: Tensor, kernel: np.ndarray) -> Tensor:
    """Apply ``outer(kernel, kernel)`` as a 'valid' 2-D filter on H, W."""
    return correlate1d_valid(correlate1d_valid(x, kernel, axis=2), kernel, axis=3)
