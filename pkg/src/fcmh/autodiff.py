"""Minimal dense N-D tensor engine with reverse-mode automatic differentiation.

Everything is float64. The op surface is exactly what the codec networks need:
conv2d / deconv2d, concat/slice, elementwise arithmetic, leaky-ReLU,
sigmoid/tanh/softplus, exp/log/abs, Gaussian CDF, nearest-neighbor upsample,
sum/mean, and a batched per-channel affine used by the factorized entropy
model. No broadcasting beyond bias addition; shapes must match exactly.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf as _erf

from .errors import ContractError

_CHECKED = False
_GRAD_ENABLED = True

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def set_checked(flag: bool) -> None:
    """Enable NaN/Inf detection on every op output (slow, for tests)."""
    global _CHECKED
    _CHECKED = bool(flag)


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _check(arr: np.ndarray) -> np.ndarray:
    if _CHECKED and not np.all(np.isfinite(arr)):
        raise ContractError("non-finite values produced (checked mode)")
    return arr


class Tensor:
    """Dense float64 tensor node in an implicit reverse-mode compute graph.

    `_prev` holds the input nodes and `_backward` the closure that routes the
    upstream gradient to them; together they form the acyclic op-record graph
    that `backward()` walks once in reverse topological order.
    """

    __slots__ = ("data", "requires_grad", "_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._prev = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing -------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(g, dtype=np.float64)
        else:
            self._grad += g

    def backward(self) -> None:
        """Reverse-mode gradient of this scalar w.r.t. all reachable leaves."""
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar loss tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if (node._backward is not None and node._backward is not _NOOP_SENTINEL
                    and node._grad is not None):
                node._backward(node._grad)

    # -- operator overloads ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other.pow(-1.0))
        return mul(self, 1.0 / float(other))

    def __rtruediv__(self, other):
        return mul(self.pow(-1.0), other)

    # -- elementwise methods ----------------------------------------------

    def pow(self, exponent: float) -> "Tensor":
        e = float(exponent)
        out = _node(_check(self.data ** e), (self,))
        if out._backward is not _NOOP_SENTINEL:
            def bwd(g):
                if self.requires_grad:
                    self._accumulate(g * (e * self.data ** (e - 1.0)))
            _set_bwd(out, bwd)
        return out

    def exp(self) -> "Tensor":
        val = _check(np.exp(self.data))
        out = _node(val, (self,))
        if out._backward is not _NOOP_SENTINEL:
            def bwd(g):
                if self.requires_grad:
                    self._accumulate(g * val)
            _set_bwd(out, bwd)
        return out

    def log(self) -> "Tensor":
        out = _node(_check(np.log(self.data)), (self,))
        if out._backward is not _NOOP_SENTINEL:
            def bwd(g):
                if self.requires_grad:
                    self._accumulate(g / self.data)
            _set_bwd(out, bwd)
        return out

    def abs(self) -> "Tensor":
        out = _node(np.abs(self.data), (self,))
        if out._backward is not _NOOP_SENTINEL:
            def bwd(g):
                if self.requires_grad:
                    self._accumulate(g * np.sign(self.data))
            _set_bwd(out, bwd)
        return out

    def leaky_relu(self, slope: float = 0.2) -> "Tensor":
        mask = self.data > 0.0
        out = _node(np.where(mask, self.data, slope * self.data), (self,))
        if out._backward is not _NOOP_SENTINEL:
            def bwd(g):
                if self.requires_grad:
                    self._accumulate(g * np.where(mask, 1.0, slope))
            _set_bwd(out, bwd)
        return out

    def sigmoid(self) -> "Tensor":
        x = self.data
        val = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                       np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        out = _node(_check(val), (self,))
        if out._backward is not _NOOP_SENTINEL:
            def bwd(g):
                if self.requires_grad:
                    self._accumulate(g * val * (1.0 - val))
            _set_bwd(out, bwd)
        return out

    def tanh(self) -> "Tensor":
        val = np.tanh(self.data)
        out = _node(val, (self,))
        if out._backward is not _NOOP_SENTINEL:
            def bwd(g):
                if self.requires_grad:
                    self._accumulate(g * (1.0 - val * val))
            _set_bwd(out, bwd)
        return out

    def softplus(self) -> "Tensor":
        out = _node(_check(np.logaddexp(0.0, self.data)), (self,))
        if out._backward is not _NOOP_SENTINEL:
            x = self.data
            def bwd(g):
                if self.requires_grad:
                    s = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
                    self._accumulate(g * s)
            _set_bwd(out, bwd)
        return out

    def normal_cdf(self) -> "Tensor":
        """Standard Gaussian CDF, elementwise."""
        out = _node(0.5 * (1.0 + _erf(self.data * _INV_SQRT2)), (self,))
        if out._backward is not _NOOP_SENTINEL:
            x = self.data
            def bwd(g):
                if self.requires_grad:
                    self._accumulate(g * _INV_SQRT2PI * np.exp(-0.5 * x * x))
            _set_bwd(out, bwd)
        return out

    def clamp_min(self, bound: float) -> "Tensor":
        mask = self.data > bound
        out = _node(np.where(mask, self.data, bound), (self,))
        if out._backward is not _NOOP_SENTINEL:
            def bwd(g):
                if self.requires_grad:
                    self._accumulate(g * mask)
            _set_bwd(out, bwd)
        return out

    def transpose(self, axes) -> "Tensor":
        out = _node(np.transpose(self.data, axes), (self,))
        if out._backward is not _NOOP_SENTINEL:
            inv = np.argsort(axes)
            def bwd(g):
                if self.requires_grad:
                    self._accumulate(np.transpose(g, inv))
            _set_bwd(out, bwd)
        return out

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = _node(np.sum(self.data, axis=axis, keepdims=keepdims), (self,))
        if out._backward is not _NOOP_SENTINEL:
            shape = self.data.shape
            def bwd(g):
                if self.requires_grad:
                    gg = g
                    if axis is not None and not keepdims:
                        gg = np.expand_dims(gg, axis)
                    self._accumulate(np.broadcast_to(gg, shape).copy())
            _set_bwd(out, bwd)
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape ops ------------------------------------------------------------

    def reshape(self, shape) -> "Tensor":
        out = _node(self.data.reshape(shape), (self,))
        if out._backward is not _NOOP_SENTINEL:
            orig = self.data.shape
            def bwd(g):
                if self.requires_grad:
                    self._accumulate(g.reshape(orig))
            _set_bwd(out, bwd)
        return out

    def slice_axis(self, axis: int, start: int, stop: int) -> "Tensor":
        idx = [slice(None)] * self.data.ndim
        idx[axis] = slice(start, stop)
        idx = tuple(idx)
        out = _node(self.data[idx].copy(), (self,))
        if out._backward is not _NOOP_SENTINEL:
            shape = self.data.shape
            def bwd(g):
                if self.requires_grad:
                    full = np.zeros(shape)
                    full[idx] = g
                    self._accumulate(full)
            _set_bwd(out, bwd)
        return out

    def upsample_nearest(self, factor: int) -> "Tensor":
        """Nearest-neighbor upsample of an NCHW tensor by an integer factor."""
        if self.data.ndim != 4:
            raise ContractError("upsample_nearest expects an NCHW tensor")
        f = int(factor)
        val = np.repeat(np.repeat(self.data, f, axis=2), f, axis=3)
        out = _node(val, (self,))
        if out._backward is not _NOOP_SENTINEL:
            n, c, h, w = self.data.shape
            def bwd(g):
                if self.requires_grad:
                    self._accumulate(g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)))
            _set_bwd(out, bwd)
        return out


_NOOP_SENTINEL = object()


def _node(data: np.ndarray, prev: tuple) -> Tensor:
    out = Tensor(_check(data))
    if _GRAD_ENABLED and any(p.requires_grad for p in prev):
        out.requires_grad = True
        out._prev = prev
        out._backward = None
    else:
        out._backward = _NOOP_SENTINEL
    return out


def _set_bwd(out: Tensor, fn) -> None:
    out._backward = fn


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shape_check(a, b)
    out = _node(a.data + b.data, (a, b))
    if out._backward is not _NOOP_SENTINEL:
        def bwd(g):
            if a.requires_grad:
                a._accumulate(_reduce_to(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_reduce_to(g, b.data.shape))
        _set_bwd(out, bwd)
    return out


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shape_check(a, b)
    out = _node(a.data * b.data, (a, b))
    if out._backward is not _NOOP_SENTINEL:
        def bwd(g):
            if a.requires_grad:
                a._accumulate(_reduce_to(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_reduce_to(g * a.data, b.data.shape))
        _set_bwd(out, bwd)
    return out


def _binary_shape_check(a: Tensor, b: Tensor) -> None:
    # Scalars pair with anything; otherwise shapes must match exactly.
    if a.data.size != 1 and b.data.size != 1 and a.data.shape != b.data.shape:
        raise ContractError(
            f"shape mismatch in elementwise op: {a.data.shape} vs {b.data.shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    d = a - b
    return (d * d).mean()


def sum_squares(a: Tensor) -> Tensor:
    return (a * a).sum()


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    """Concatenate along `axis`; all other dims must match."""
    if not tensors:
        raise ContractError("concat of an empty list")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        if len(s) != len(base) or any(
                i != axis and s[i] != base[i] for i in range(len(base))):
            raise ContractError(
                f"concat shape mismatch on non-concat axes: {tensors[0].shape} vs {t.shape}")
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    if out._backward is not _NOOP_SENTINEL:
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        def bwd(g):
            parts = np.split(g, splits, axis=axis)
            for t, p in zip(tensors, parts):
                if t.requires_grad:
                    t._accumulate(p)
        _set_bwd(out, bwd)
    return out


# -- convolution ---------------------------------------------------------------


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    """(N, C, Hp, Wp) -> contiguous (N*OH*OW, C*k*k) patch matrix."""
    if k == 1:
        xs = xp[:, :, ::stride, ::stride]
        n, c, oh, ow = xs.shape
        return xs.transpose(0, 2, 3, 1).reshape(n * oh * ow, c), oh, ow
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    mat = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
    return mat, oh, ow


def _conv_fwd(xp: np.ndarray, w: np.ndarray, stride: int,
              bias: np.ndarray | None = None
              ) -> tuple[np.ndarray, np.ndarray, int, int]:
    o, ci, k, _ = w.shape
    mat, oh, ow = _im2col(xp, k, stride)
    out = mat @ w.reshape(o, ci * k * k).T
    if bias is not None:
        out += bias
    n = xp.shape[0]
    return out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2), mat, oh, ow


def _dilate(y: np.ndarray, stride: int) -> np.ndarray:
    if stride == 1:
        return y
    n, c, h, w = y.shape
    out = np.zeros((n, c, (h - 1) * stride + 1, (w - 1) * stride + 1))
    out[:, :, ::stride, ::stride] = y
    return out


def _conv_input_grad(g: np.ndarray, w: np.ndarray, stride: int, padding: int,
                     in_shape: tuple) -> np.ndarray:
    """Adjoint of the forward correlation; also the deconv forward kernel.

    Computed as a stride-1 correlation of the (dilated) upstream gradient with
    the spatially flipped, channel-transposed weights.
    """
    n, c_in, h, wd = in_shape
    o, _, k, _ = w.shape
    w_t = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gd = _pad2d(_dilate(g, stride), k - 1)
    full, _, fh, fw = _conv_fwd(gd, w_t, 1)
    hp, wp = h + 2 * padding, wd + 2 * padding
    if fh < hp or fw < wp:
        full = np.pad(full, ((0, 0), (0, 0), (0, hp - fh), (0, wp - fw)))
    if padding:
        full = full[:, :, padding:-padding, padding:-padding]
    return full


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and OIKK weights."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ContractError("conv2d expects NCHW input and OIKK weights")
    if x.data.shape[1] != w.data.shape[1]:
        raise ContractError(
            f"conv2d channel mismatch: input {x.data.shape[1]} vs weight {w.data.shape[1]}")
    k = w.data.shape[2]
    h_out = (x.data.shape[2] + 2 * padding - k) // stride + 1
    w_out = (x.data.shape[3] + 2 * padding - k) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ContractError("conv2d output spatial dims are not positive")
    if b is not None and b.data.shape != (w.data.shape[0],):
        raise ContractError("conv2d bias must have one entry per output channel")
    xp = _pad2d(x.data, padding)
    val, pat_mat, oh, ow = _conv_fwd(xp, w.data, stride,
                                     None if b is None else b.data)
    prev = (x, w) if b is None else (x, w, b)
    out = _node(val, prev)
    if out._backward is not _NOOP_SENTINEL:
        in_shape = x.data.shape
        w_shape = w.data.shape
        def bwd(g):
            n = g.shape[0]
            g_mat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, w_shape[0])
            if x.requires_grad:
                x._accumulate(_conv_input_grad(g, w.data, stride, padding, in_shape))
            if w.requires_grad:
                w._accumulate((g_mat.T @ pat_mat).reshape(w_shape))
            if b is not None and b.requires_grad:
                b._accumulate(g_mat.sum(axis=0))
        _set_bwd(out, bwd)
    return out


def deconv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1,
             padding: int = 0) -> Tensor:
    """Transposed convolution: exact adjoint of conv2d with the same weights.

    Input has O channels, output has I channels (weights stay OIKK); output
    spatial size is (H-1)*stride + K - 2*padding.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ContractError("deconv2d expects NCHW input and OIKK weights")
    if x.data.shape[1] != w.data.shape[0]:
        raise ContractError(
            f"deconv2d channel mismatch: input {x.data.shape[1]} vs weight {w.data.shape[0]}")
    k = w.data.shape[2]
    h_out = (x.data.shape[2] - 1) * stride + k - 2 * padding
    w_out = (x.data.shape[3] - 1) * stride + k - 2 * padding
    if h_out <= 0 or w_out <= 0:
        raise ContractError("deconv2d output spatial dims are not positive")
    out_shape = (x.data.shape[0], w.data.shape[1], h_out, w_out)
    val = _conv_input_grad(x.data, w.data, stride, padding, out_shape)
    if b is not None:
        if b.data.shape != (w.data.shape[1],):
            raise ContractError("deconv2d bias must have one entry per output channel")
        val = val + b.data.reshape(1, -1, 1, 1)
    prev = (x, w) if b is None else (x, w, b)
    out = _node(val, prev)
    if out._backward is not _NOOP_SENTINEL:
        w_shape = w.data.shape
        def bwd(g):
            gp = _pad2d(g, padding)
            if x.requires_grad:
                gv, _, _, _ = _conv_fwd(gp, w.data, stride)
                x._accumulate(gv)
            if w.requires_grad:
                pat_mat, poh, pow_ = _im2col(gp, k, stride)
                n = x.data.shape[0]
                t_mat = x.data.transpose(0, 2, 3, 1).reshape(n * poh * pow_,
                                                             w_shape[0])
                w._accumulate((t_mat.T @ pat_mat).reshape(w_shape))
            if b is not None and b.requires_grad:
                b._accumulate(g.sum(axis=(0, 2, 3)))
        _set_bwd(out, bwd)
    return out


def channel_affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Batched per-channel affine map: (C,M,N) x (C,O,M) + (C,O,1) -> (C,O,N)."""
    if x.data.ndim != 3 or w.data.ndim != 3 or b.data.ndim != 3:
        raise ContractError("channel_affine expects rank-3 operands")
    val = np.matmul(w.data, x.data) + b.data
    out = _node(val, (x, w, b))
    if out._backward is not _NOOP_SENTINEL:
        def bwd(g):
            if x.requires_grad:
                x._accumulate(np.matmul(w.data.transpose(0, 2, 1), g))
            if w.requires_grad:
                w._accumulate(np.matmul(g, x.data.transpose(0, 2, 1)))
            if b.requires_grad:
                b._accumulate(g.sum(axis=2, keepdims=True))
        _set_bwd(out, bwd)
    return out


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """Broadcast multiply (C,D,N) by per-row factors (C,D,1)."""
    if x.data.ndim != 3 or s.data.ndim != 3 or s.data.shape[2] != 1:
        raise ContractError("channel_scale expects (C,D,N) and (C,D,1) operands")
    out = _node(x.data * s.data, (x, s))
    if out._backward is not _NOOP_SENTINEL:
        def bwd(g):
            if x.requires_grad:
                x._accumulate(g * s.data)
            if s.requires_grad:
                s._accumulate((g * x.data).sum(axis=2, keepdims=True))
        _set_bwd(out, bwd)
    return out


def grad_check(f, x: Tensor, h: float = 1e-5, max_coords: int | None = None,
               seed: int = 0) -> float:
    """Compare analytic gradients of scalar-valued `f` against central differences.

    Returns max over checked coordinates of |analytic - numeric| / max(1, |analytic|).
    With `max_coords`, a deterministic subsample of coordinates is checked.
    """
    x.zero_grad()
    x.requires_grad = True
    out = f(x)
    if out.size != 1:
        raise ContractError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = x.grad.copy()

    flat = x.data.reshape(-1)
    n = flat.size
    if max_coords is not None and max_coords < n:
        rng = np.random.default_rng(seed)
        coords = np.sort(rng.choice(n, size=max_coords, replace=False))
    else:
        coords = np.arange(n)

    a_flat = analytic.reshape(-1)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        with no_grad():
            f_hi = float(f(x).data)
        flat[i] = orig - h
        with no_grad():
            f_lo = float(f(x).data)
        flat[i] = orig
        numeric = (f_hi - f_lo) / (2.0 * h)
        err = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]))
        worst = max(worst, err)
    return worst
