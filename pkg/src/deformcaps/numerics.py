"""Dense float64 tensors with reverse-mode differentiation.

Every op builds a node holding its parents and a closure that pushes the
node's gradient back to them. ``Tensor.backward`` walks the graph in reverse
topological order. Heavy ops used by the detector (im2col convolution) live
here too so that every backward rule is checked through the same harness.
"""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """A function evaluated during gradient checking returned inf/nan."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside this block (inference only)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def make_rng(seed: int | Sequence[int]) -> np.random.Generator:
    """Named PCG64 generator; callers thread it explicitly."""
    return np.random.Generator(np.random.PCG64(seed))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable[[np.ndarray], None] | None = None, name: str = ""):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = _GRAD_ENABLED and (requires_grad or any(p.requires_grad for p in _parents))
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.asarray(grad, dtype=DTYPE))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior gradients are not needed after propagation
                if node._parents:
                    node.grad = None

    # operator sugar
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
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Parameter:
    value: Tensor
    name: str


class ParameterRegistry:
    """Ordered name -> Parameter map that refuses duplicate names."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)
        self._params[name] = Parameter(t, name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name].value

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.value.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.value.data.copy() for n, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for n, p in self._params.items():
            arr = np.asarray(state[n], dtype=DTYPE)
            if arr.shape != p.value.shape:
                raise ShapeError(f"parameter {n!r}: stored shape {arr.shape} vs model shape {p.value.shape}")
            p.value.data = arr.copy()


# ---------------------------------------------------------------------------
# broadcasting helpers

def broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    n = max(len(a), len(b))
    pa = (1,) * (n - len(a)) + tuple(a)
    pb = (1,) * (n - len(b)) + tuple(b)
    out = []
    for x, y in zip(pa, pb):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"shapes {tuple(a)} and {tuple(b)} are not broadcast-compatible")
        out.append(max(x, y))
    return tuple(out)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(a, b, fwd, grad_a, grad_b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    out_data = fwd(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accum(unbroadcast(grad_a(g, a.data, b.data, out_data), a.shape))
        if b.requires_grad:
            b._accum(unbroadcast(grad_b(g, a.data, b.data, out_data), b.shape))

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b) -> Tensor:
    return _binary(a, b, np.divide, lambda g, x, y, o: g / y, lambda g, x, y, o: -g * x / (y * y))


def _unary(x, fwd, grad) -> Tensor:
    x = as_tensor(x)
    out_data = fwd(x.data)

    def backward(g):
        x._accum(grad(g, x.data, out_data))

    return Tensor(out_data, _parents=(x,), _backward=backward)


def neg(x) -> Tensor:
    return _unary(x, np.negative, lambda g, x, o: -g)


def exp(x) -> Tensor:
    return _unary(x, np.exp, lambda g, x, o: g * o)


def log(x) -> Tensor:
    return _unary(x, np.log, lambda g, x, o: g / x)


def sqrt(x) -> Tensor:
    return _unary(x, np.sqrt, lambda g, x, o: g * 0.5 / o)


def power(x, p: float) -> Tensor:
    if p == 2:
        return _unary(x, np.square, lambda g, x, o: 2.0 * g * x)
    return _unary(x, lambda v: np.power(v, p), lambda g, x, o: g * p * np.power(x, p - 1))


def absolute(x) -> Tensor:
    return _unary(x, np.abs, lambda g, x, o: g * np.sign(x))


def sigmoid(x) -> Tensor:
    def fwd(v):
        # split by sign so exp never overflows
        out = np.empty_like(v)
        pos = v >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        e = np.exp(v[~pos])
        out[~pos] = e / (1.0 + e)
        return out

    return _unary(x, fwd, lambda g, x, o: g * o * (1.0 - o))


def relu(x) -> Tensor:
    return _unary(x, lambda v: np.maximum(v, 0.0), lambda g, x, o: g * (x > 0))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where clamping was active."""
    return _unary(x, lambda v: np.clip(v, lo, hi), lambda g, x, o: g * ((x >= lo) & (x <= hi)))


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    shape = broadcast_shape(broadcast_shape(cond.shape, a.shape), b.shape)
    out_data = np.where(cond, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accum(unbroadcast(np.where(cond, g, 0.0), a.shape))
        if b.requires_grad:
            b._accum(unbroadcast(np.where(cond, 0.0, g), b.shape))

    return Tensor(np.broadcast_to(out_data, shape).copy(), _parents=(a, b), _backward=backward)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand(g: np.ndarray, axes: tuple[int, ...], keepdims: bool) -> np.ndarray:
    if keepdims:
        return g
    for ax in sorted(axes):
        g = np.expand_dims(g, ax)
    return g


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out_data = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        x._accum(np.broadcast_to(_expand(g, axes, keepdims), x.shape).copy())

    return Tensor(out_data, _parents=(x,), _backward=backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    n = math.prod(x.shape[a] for a in axes) if axes else 1
    return tsum(x, axis, keepdims) * (1.0 / n)


def tmax(x, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; tied maxima share the gradient equally."""
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    kept = x.data.max(axis=axes, keepdims=True)
    out_data = kept if keepdims else kept.squeeze(axis=axes) if axes else kept.reshape(())

    def backward(g):
        hit = (x.data == kept).astype(DTYPE)
        hit /= hit.sum(axis=axes, keepdims=True)
        x._accum(hit * _expand(g, axes, keepdims))

    return Tensor(out_data, _parents=(x,), _backward=backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accum(out_data * (g - (g * out_data).sum(axis=axis, keepdims=True)))

    return Tensor(out_data, _parents=(x,), _backward=backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out_data = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        x._accum(g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    return Tensor(out_data, _parents=(x,), _backward=backward)


def matmul(a, b) -> Tensor:
    """Matrix product; leading dims follow numpy's batched matmul rules."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accum(unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accum(unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.reshape(shape)
    return Tensor(out_data, _parents=(x,), _backward=lambda g: x._accum(g.reshape(x.shape)))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)
    out_data = np.ascontiguousarray(x.data.transpose(axes))
    return Tensor(out_data, _parents=(x,), _backward=lambda g: x._accum(g.transpose(inv)))


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    out_data = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accum(full)

    return Tensor(np.array(out_data, copy=True), _parents=(x,), _backward=backward)


def concat(xs: Iterable, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out_data = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                x._accum(np.take(g, np.arange(lo, hi), axis=axis))

    return Tensor(out_data, _parents=tuple(xs), _backward=backward)


# ---------------------------------------------------------------------------
# convolution

def _window(start: int, stride: int, n: int) -> slice:
    return slice(start, start + stride * (n - 1) + 1, stride)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation. x [B, C, H, W], w [O, C, k, k], b [O]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects x [B,C,H,W] and w [O,C,k,k], got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Cw, k, k2 = w.shape
    if Cw != C or k != k2:
        raise ShapeError(f"conv2d channel/kernel mismatch: x {x.shape}, w {w.shape}")
    span = dilation * (k - 1) + 1
    out_h = (H + 2 * padding - span) // stride + 1
    out_w = (W + 2 * padding - span) // stride + 1
    L = out_h * out_w
    # channel-major layout so the whole batch is one GEMM: cols [C*k*k, B*L]
    xc = x.data.transpose(1, 0, 2, 3)
    xp = np.pad(xc, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xc
    cols = np.empty((C, k, k, B, out_h, out_w), dtype=DTYPE)
    for u in range(k):
        for v in range(k):
            cols[:, u, v] = xp[:, :, _window(u * dilation, stride, out_h), _window(v * dilation, stride, out_w)]
    cols = cols.reshape(C * k * k, B * L)
    wmat = w.data.reshape(O, C * k * k)
    out = wmat @ cols
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out += b.data[:, None]
        parents.append(b)
    out_data = np.ascontiguousarray(out.reshape(O, B, out_h, out_w).transpose(1, 0, 2, 3))

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(O, B * L)
        if w.requires_grad:
            w._accum((g2 @ cols.T).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accum(g2.sum(axis=1))
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(C, k, k, B, out_h, out_w)
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            for u in range(k):
                for v in range(k):
                    gxp[:, :, _window(u * dilation, stride, out_h),
                        _window(v * dilation, stride, out_w)] += gcols[:, u, v]
            if padding:
                gxp = gxp[:, :, padding:padding + H, padding:padding + W]
            x._accum(gxp.transpose(1, 0, 2, 3))

    return Tensor(out_data, _parents=tuple(parents), _backward=backward)


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor. The error at each coordinate is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    x0 = np.array(as_tensor(x).data, dtype=DTYPE, copy=True)
    xt = Tensor(x0.copy(), requires_grad=True)
    y = f(xt)
    if y.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got output shape {y.shape}")
    y.backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)

    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        vals = []
        for step in (h, -h):
            xi = flat.copy()
            xi[i] += step
            v = float(f(Tensor(xi.reshape(x0.shape))).data)
            if not math.isfinite(v):
                raise NonFiniteError(f"f is non-finite ({v}) at coordinate {i} with step {step:+g}")
            vals.append(v)
        num_flat[i] = (vals[0] - vals[1]) / (2 * h)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0
