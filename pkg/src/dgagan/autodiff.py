"""Reverse-mode automatic differentiation over dense numpy tensors.

A ``Tensor`` wraps an ndarray and, while grad mode is enabled, every
operation records a backward closure on a per-forward-pass tape.  Calling
``backward()`` on a scalar walks the tape once in reverse topological
order, deposits gradients on ``requires_grad`` leaves, and frees the
graph.  Only first-order gradients are supported; the tape is consumed by
the backward pass and cannot be replayed.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / detached passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def enable_grad():
    """Force tape recording inside the block (dedicated gradient passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = True
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """Dense N-d array node in the reverse-mode graph.

    ``requires_grad`` on a leaf marks it as a gradient sink; intermediate
    results produced from tracked inputs are tracked automatically.
    """

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._prev: tuple[Tensor, ...] | None = None
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._consumed = False

    # ------------------------------------------------------------------ basics

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ---------------------------------------------------------------- backward

    def backward(self) -> dict["Tensor", np.ndarray]:
        """Reverse-mode pass from this scalar; returns the leaf gradient table.

        Gradients accumulate into ``.grad`` of every reachable
        ``requires_grad`` leaf.  The tape is freed afterwards; a second
        call on the same graph raises.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("graph already consumed by a previous backward pass")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._prev is not None:
                for p in node._prev:
                    if id(p) not in visited:
                        stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        table: dict[Tensor, np.ndarray] = {}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._prev is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                    table[node] = node.grad
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._prev, parent_grads):
                if pg is None:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            node._prev = None
            node._backward = None
        self._consumed = True
        return table


def ensure_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _tracked(t: Tensor) -> bool:
    return t.requires_grad


def _needs(t: Tensor) -> bool:
    # Leaf constants never need a gradient; skip their backward work.
    return t.requires_grad


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(_tracked(p) for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ------------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a = ensure_tensor(a)
    b = ensure_tensor(b, like=a)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = ensure_tensor(a)
    b = ensure_tensor(b, like=a)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = ensure_tensor(a)
    b = ensure_tensor(b, like=a)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a = ensure_tensor(a)
    b = ensure_tensor(b, like=a)
    return _make(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def absolute(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def power(a: Tensor, exponent: float) -> Tensor:
    data = a.data ** exponent
    return _make(data, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)
    return _make(data, (a,), lambda g: (g * 0.5 / data,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log requires strictly positive inputs")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)) evaluated without overflow."""
    e = np.exp(-np.abs(a.data))
    data = np.maximum(a.data, 0.0) + np.log1p(e)
    sig = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(data, (a,), lambda g: (g * sig,))


_ELEMENTWISE_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}
_ELEMENTWISE_UNARY = {"abs": absolute, "square": square, "log": log, "neg": neg, "exp": exp}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch table over the elementwise op vocabulary."""
    if op_kind in _ELEMENTWISE_BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        a = ensure_tensor(a)
        b2 = ensure_tensor(b, like=a)
        if b2.size != 1 and a.size != 1 and a.shape != b2.shape:
            raise ValueError(f"shape mismatch: {a.shape} vs {b2.shape}")
        return _ELEMENTWISE_BINARY[op_kind](a, b2)
    if op_kind in _ELEMENTWISE_UNARY:
        return _ELEMENTWISE_UNARY[op_kind](ensure_tensor(a))
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ------------------------------------------------------------------ reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, a.shape).copy(),)

    return _make(data, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def tmax(a: Tensor) -> Tensor:
    """Global max; subgradient routed to the first maximal element."""
    idx = int(np.argmax(a.data))
    data = a.data.reshape(-1)[idx]

    def bw(g):
        gi = np.zeros_like(a.data).reshape(-1)
        gi[idx] = np.asarray(g).reshape(-1)[0]
        return (gi.reshape(a.shape),)

    return _make(np.asarray(data), (a,), bw)


def tmin(a: Tensor) -> Tensor:
    return neg(tmax(neg(a)))


# ------------------------------------------------------------------ linear ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects rank-2 tensors")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner extents disagree: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [ensure_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), bw)


def getitem(a: Tensor, key) -> Tensor:
    data = a.data[key]

    def bw(g):
        gi = np.zeros_like(a.data)
        gi[key] = g
        return (gi,)

    return _make(data, (a,), bw)


# ----------------------------------------------------------------- activations


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    slope = np.where(a.data > 0, 1.0, alpha)
    return _make(a.data * slope, (a,), lambda g: (g * slope,))


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)
    return _make(data, (a,), lambda g: (g * (1.0 - data * data),))


def sigmoid(a: Tensor) -> Tensor:
    e = np.exp(-np.abs(a.data))
    data = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(data, (a,), lambda g: (g * data * (1.0 - data),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _make(data, (a,), bw)


def activation(kind: str, a: Tensor, alpha: float = 0.2, axis: int = -1) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "leaky_relu":
        return leaky_relu(a, alpha)
    if kind == "tanh":
        return tanh(a)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "softmax":
        return softmax(a, axis=axis)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- convolution


def _triple(v) -> tuple[int, int, int]:
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError("expected a triple")
    return t


def conv_out_extent(n: int, k: int, stride: int, dilation: int, pad: int) -> int:
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _conv3d_raw(x: np.ndarray, k: np.ndarray, stride, dilation, padding) -> np.ndarray:
    sd, sh, sw = stride
    dd, dh, dw = dilation
    pd, ph, pw = padding
    kd, kh, kw = k.shape[2:]
    xp = np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))
    eff = (dd * (kd - 1) + 1, dh * (kh - 1) + 1, dw * (kw - 1) + 1)
    v = sliding_window_view(xp, eff, axis=(1, 2, 3))
    v = v[:, ::sd, ::sh, ::sw, ::dd, ::dh, ::dw]
    return np.tensordot(k, v, axes=([1, 2, 3, 4], [0, 4, 5, 6]))


def _conv3d_kernel_grad(x, g, k_shape, stride, dilation, padding):
    sd, sh, sw = stride
    dd, dh, dw = dilation
    pd, ph, pw = padding
    kd, kh, kw = k_shape[2:]
    xp = np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))
    eff = (dd * (kd - 1) + 1, dh * (kh - 1) + 1, dw * (kw - 1) + 1)
    v = sliding_window_view(xp, eff, axis=(1, 2, 3))
    v = v[:, ::sd, ::sh, ::sw, ::dd, ::dh, ::dw]
    # dK[o, c, a] = sum over output positions of g[o] * patch[c, a]
    return np.tensordot(g, v, axes=([1, 2, 3], [1, 2, 3]))


def _conv3d_input_grad(g, k, x_shape, stride, dilation, padding):
    sd, sh, sw = stride
    dd, dh, dw = dilation
    pd, ph, pw = padding
    kd, kh, kw = k.shape[2:]
    c_in, D, H, W = x_shape
    # Zero-stuff the upstream gradient by the stride, then correlate with the
    # spatially flipped, channel-transposed kernel (transposed convolution).
    stuffed = np.zeros(
        (g.shape[0], (g.shape[1] - 1) * sd + 1, (g.shape[2] - 1) * sh + 1,
         (g.shape[3] - 1) * sw + 1), dtype=g.dtype)
    stuffed[:, ::sd, ::sh, ::sw] = g
    kf = np.ascontiguousarray(k[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    full_pad = (dd * (kd - 1), dh * (kh - 1), dw * (kw - 1))
    core = _conv3d_raw(stuffed, kf, (1, 1, 1), dilation, full_pad)
    gxp = np.zeros((c_in, D + 2 * pd, H + 2 * ph, W + 2 * pw), dtype=g.dtype)
    gxp[:, :core.shape[1], :core.shape[2], :core.shape[3]] = core
    return gxp[:, pd:pd + D, ph:ph + H, pw:pw + W]


def conv3d(x: Tensor, kernel: Tensor, stride=1, dilation=1, padding=0) -> Tensor:
    """Dilated 3D cross-correlation: x [C_in,D,H,W] * kernel [C_out,C_in,kd,kh,kw]."""
    stride = _triple(stride)
    dilation = _triple(dilation)
    padding = _triple(padding)
    if x.ndim != 4 or kernel.ndim != 5:
        raise ValueError("conv3d expects x rank 4 and kernel rank 5")
    if x.shape[0] != kernel.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape[0]} vs kernel {kernel.shape[1]}")
    if any(s < 1 for s in stride) or any(d < 1 for d in dilation):
        raise ValueError("stride and dilation must be >= 1")
    out_sp = [conv_out_extent(n, k, s, d, p)
              for n, k, s, d, p in zip(x.shape[1:], kernel.shape[2:], stride, dilation, padding)]
    if any(n < 1 for n in out_sp):
        raise ValueError(
            f"conv3d output extent underflow: input {x.shape[1:]}, kernel {kernel.shape[2:]}, "
            f"stride {stride}, dilation {dilation}, padding {padding}")

    data = _conv3d_raw(x.data, kernel.data, stride, dilation, padding)

    def bw(g):
        gx = (_conv3d_input_grad(g, kernel.data, x.shape, stride, dilation, padding)
              if (x.requires_grad or x._prev is not None) else None)
        gk = (_conv3d_kernel_grad(x.data, g, kernel.shape, stride, dilation, padding)
              if (kernel.requires_grad or kernel._prev is not None) else None)
        return (gx, gk)

    return _make(data, (x, kernel), bw)


# -------------------------------------------------------------------- pooling


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: [C,D,H,W] -> [C]."""
    if x.ndim != 4:
        raise ValueError("global_avg_pool expects a rank-4 tensor")
    n = x.shape[1] * x.shape[2] * x.shape[3]
    data = x.data.mean(axis=(1, 2, 3))

    def bw(g):
        return (np.broadcast_to((g / n)[:, None, None, None], x.shape).copy(),)

    return _make(data, (x,), bw)


def max_pool3d(x: Tensor, factor: int = 2) -> Tensor:
    if x.ndim != 4:
        raise ValueError("max_pool3d expects a rank-4 tensor")
    c, D, H, W = x.shape
    f = factor
    if D % f or H % f or W % f:
        raise ValueError(f"spatial extents {x.shape[1:]} not divisible by pool factor {f}")
    blocks = x.data.reshape(c, D // f, f, H // f, f, W // f, f)
    blocks = blocks.transpose(0, 1, 3, 5, 2, 4, 6).reshape(c, D // f, H // f, W // f, f ** 3)
    idx = blocks.argmax(axis=-1)
    data = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(c, D // f, H // f, W // f, f, f, f)
        gb = gb.transpose(0, 1, 4, 2, 5, 3, 6).reshape(c, D, H, W)
        return (gb,)

    return _make(data, (x,), bw)


# -------------------------------------------------------------- interpolation


def _interp_plan(src: int, dst: int):
    """Align-corners sample positions: index pairs and weights per output index."""
    if dst > 1 and src > 1:
        pos = np.arange(dst) * ((src - 1) / (dst - 1))
    else:
        pos = np.zeros(dst)
    i0 = np.floor(pos).astype(np.intp)
    i0 = np.minimum(i0, src - 1)
    i1 = np.minimum(i0 + 1, src - 1)
    w1 = pos - i0
    return i0, i1, 1.0 - w1, w1


def upsample_trilinear(x: Tensor, target) -> Tensor:
    """Align-corners trilinear resampling of [C,d,h,w] to [C,D,H,W]."""
    target = _triple(target)
    if x.ndim != 4:
        raise ValueError("upsample_trilinear expects a rank-4 tensor")
    if any(t < s for t, s in zip(target, x.shape[1:])):
        raise ValueError(f"target {target} smaller than source {x.shape[1:]}")
    plans = [_interp_plan(s, t) for s, t in zip(x.shape[1:], target)]

    def fwd_axis(arr, axis, plan):
        i0, i1, w0, w1 = plan
        shape = [1] * arr.ndim
        shape[axis] = len(i0)
        w0r = w0.reshape(shape)
        w1r = w1.reshape(shape)
        return w0r * np.take(arr, i0, axis=axis) + w1r * np.take(arr, i1, axis=axis)

    data = x.data
    for ax, plan in enumerate(plans, start=1):
        data = fwd_axis(data, ax, plan)

    def bw(g):
        for ax in (3, 2, 1):
            i0, i1, w0, w1 = plans[ax - 1]
            src = x.shape[ax]
            gm = np.moveaxis(g, ax, 0)
            acc = np.zeros((src,) + gm.shape[1:], dtype=g.dtype)
            wshape = (len(i0),) + (1,) * (gm.ndim - 1)
            np.add.at(acc, i0, w0.reshape(wshape) * gm)
            np.add.at(acc, i1, w1.reshape(wshape) * gm)
            g = np.moveaxis(acc, 0, ax)
        return (g,)

    return _make(data, (x,), bw)


# ------------------------------------------------------------ operator sugar


def _binop(name, fn):
    def op(self, other):
        return fn(self, ensure_tensor(other, like=self))

    def rop(self, other):
        return fn(ensure_tensor(other, like=self), self)

    setattr(Tensor, f"__{name}__", op)
    setattr(Tensor, f"__r{name}__", rop)


_binop("add", add)
_binop("sub", sub)
_binop("mul", mul)
_binop("truediv", div)
_binop("matmul", matmul)
Tensor.__neg__ = neg
Tensor.__pow__ = power
Tensor.__getitem__ = getitem
Tensor.sum = tsum
Tensor.mean = tmean
Tensor.reshape = reshape
Tensor.abs = absolute
