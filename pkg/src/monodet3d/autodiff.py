"""Dense float64 tensors with tape-recorded reverse-mode differentiation.

The operation set is fixed to what the detector needs: matmul (plain or
batched over a leading axis), conv2d, softmax, layer_norm, elementwise
arithmetic, nearest-neighbor resampling, gather/concat and shape moves.
Graphs are built define-by-run; ``Tensor.backward`` replays the recorded
tape in reverse topological order. Everything is float64 and single
threaded within one forward/backward pass.
"""

from __future__ import annotations

import numpy as np

from . import kernels

_CHECK_FINITE = False


def set_check_finite(enabled: bool) -> None:
    """Toggle NaN/Inf detection on every op output (off by default)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class Tensor:
    """A dense float64 array plus an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if _CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite values in tensor")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, no tape attachment."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Propagate d(self)/d(leaf) into every reachable requires_grad leaf.

        self must be scalar. Leaf gradients accumulate across repeated
        calls; interior gradients are recomputed each time.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        for node in topo:
            if node._parents:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _acc(t: Tensor, g: np.ndarray) -> None:
    # never mutate grad buffers in place: rebinding keeps aliases safe
    t.grad = g if t.grad is None else t.grad + g


def _make(data, parents, backward) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to shape, inverting numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a_shape, b_shape) -> None:
    for sa, sb in zip(reversed(a_shape), reversed(b_shape)):
        if sa != sb and sa != 1 and sb != 1:
            raise ValueError(f"shapes {a_shape} and {b_shape} do not broadcast")


# -- elementwise ---------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b_val = float(b)

        def bw_scalar(g):
            _acc(a, g)

        return _make(a.data + b_val, (a,), bw_scalar)
    _check_broadcast(a.shape, b.shape)

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b_val = float(b)

        def bw_scalar(g):
            _acc(a, g * b_val)

        return _make(a.data * b_val, (a,), bw_scalar)
    _check_broadcast(a.shape, b.shape)

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw)


def maximum(a: Tensor, b) -> Tensor:
    """Elementwise max; at ties the first argument takes the gradient."""
    if not isinstance(b, Tensor):
        b = Tensor(np.full((), float(b)))
    _check_broadcast(a.shape, b.shape)
    take_a = a.data >= b.data

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * take_a, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * ~take_a, b.shape))

    return _make(np.maximum(a.data, b.data), (a, b), bw)


def minimum(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b = Tensor(np.full((), float(b)))
    _check_broadcast(a.shape, b.shape)
    take_a = a.data <= b.data

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * take_a, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * ~take_a, b.shape))

    return _make(np.minimum(a.data, b.data), (a, b), bw)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    return minimum(maximum(x, lo), hi)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        _acc(x, g * mask)

    return _make(x.data * mask, (x,), bw)


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)  # subgradient 0 at the kink

    def bw(g):
        _acc(x, g * sign)

    return _make(np.abs(x.data), (x,), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        _acc(x, g * out)

    return _make(out, (x,), bw)


def log(x: Tensor) -> Tensor:
    def bw(g):
        _acc(x, g / x.data)

    return _make(np.log(x.data), (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)

    def bw(g):
        _acc(x, g * out * (1.0 - out))

    return _make(out, (x,), bw)


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)), stable for any logit magnitude."""
    d = x.data
    out = np.minimum(d, 0.0) - np.log1p(np.exp(-np.abs(d)))
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    s[~pos] = ez / (1.0 + ez)

    def bw(g):
        _acc(x, g * (1.0 - s))

    return _make(out, (x,), bw)


# -- reductions and shape moves ------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is None:
            _acc(x, np.broadcast_to(g, x.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        _acc(x, np.broadcast_to(gg, x.shape).copy())

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = x.size
    else:
        n = x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        _acc(x, g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), bw)


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def bw(g):
        _acc(x, g.transpose(inv))

    return _make(x.data.transpose(axes), (x,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _acc(t, g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def gather(x: Tensor, indices, axis: int = 0) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("gather expects a 1-D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis]):
        raise IndexError(f"gather index out of range for axis {axis} with extent {x.shape[axis]}")

    def bw(g):
        buf = np.zeros(x.shape)
        buf_sw = np.swapaxes(buf, 0, axis)
        np.add.at(buf_sw, idx, np.swapaxes(g, 0, axis))
        _acc(x, buf)

    return _make(np.take(x.data, idx, axis=axis), (x,), bw)


# -- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ValueError(f"matmul expects both 2-D or both 3-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if a.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ValueError(f"matmul batch extents differ: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _acc(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _acc(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _acc(x, out * (g - dot))

    return _make(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Composed stable log-softmax; the max shift is a constant on the tape."""
    m = x.data.max(axis=axis, keepdims=True)
    shifted = add(x, Tensor(-m))
    lse = log(tsum(exp(shifted), axis=axis, keepdims=True))
    return add(shifted, mul(lse, -1.0))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ValueError("layer_norm gain/bias must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            _acc(gain, (g * xhat).reshape(-1, c).sum(axis=0))
        if bias.requires_grad:
            _acc(bias, g.reshape(-1, c).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _acc(x, inv * (dxhat - m1 - xhat * m2))

    return _make(out, (x, gain, bias), bw)


# -- convolution and resampling --------------------------------------------


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate x [Cin,H,W] with kernels w [Cout,Cin,kh,kw]."""
    if x.ndim != 3 or w.ndim != 4:
        raise ValueError(f"conv2d expects x [C,H,W] and w [O,C,kh,kw], got {x.shape}, {w.shape}")
    y = kernels.conv2d_forward(x.data, w.data, stride, padding)

    def bw(g):
        if x.requires_grad:
            _acc(x, kernels.conv2d_grad_input(g, w.data, x.shape, stride, padding))
        if w.requires_grad:
            _acc(w, kernels.conv2d_grad_weight(g, x.data, w.shape, stride, padding))

    return _make(y, (x, w), bw)


def _check_pow2(factor: int) -> None:
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"resampling factor must be a positive power of two, got {factor}")


def interpolate_nearest(x: Tensor, factor: int) -> Tensor:
    """Upsample [C,H,W] by an integer factor; source index is floor(dst/f)."""
    _check_pow2(factor)
    if factor == 1:
        return x
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def bw(g):
        _acc(x, g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)))

    return _make(out, (x,), bw)


def downsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Downsample [C,H,W] by taking every factor-th sample (floor convention)."""
    _check_pow2(factor)
    if factor == 1:
        return x

    def bw(g):
        buf = np.zeros(x.shape)
        buf[:, ::factor, ::factor] = g
        _acc(x, buf)

    return _make(x.data[:, ::factor, ::factor].copy(), (x,), bw)
