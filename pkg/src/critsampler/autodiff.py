"""A small tape-free reverse-mode autodiff engine over float64 numpy arrays.

Only the operators the samplers need are provided: elementwise arithmetic,
``sigmoid``/``log``/``log_sigmoid``/``tanh``, reductions, and a same-size 2D
convolution with circular or zero padding and optional autoregressive mask.
Broadcasting between two tensors is limited to scalar-vs-tensor; a tensor may
be combined with a constant ndarray of any broadcastable shape.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, log_expit

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording backward closures."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate ``d self / d leaf`` into ``.grad`` of every leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(-self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return tmean(self)


def _node(data, parents, backward) -> Tensor:
    parents = tuple(parents)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_pair(a: Tensor, b: Tensor):
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ValueError(f"incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _check_pair(a, b)
        return _node(
            a.data + b.data,
            (a, b),
            lambda g: (_sum_to(g, a.shape), _sum_to(g, b.shape)),
        )
    if not isinstance(a, Tensor):
        a, b = b, a
    const = np.asarray(b, dtype=np.float64)
    return _node(a.data + const, (a,), lambda g: (_sum_to(g, a.shape),))


def mul(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _check_pair(a, b)
        return _node(
            a.data * b.data,
            (a, b),
            lambda g: (_sum_to(g * b.data, a.shape), _sum_to(g * a.data, b.shape)),
        )
    if not isinstance(a, Tensor):
        a, b = b, a
    const = np.asarray(b, dtype=np.float64)
    return _node(a.data * const, (a,), lambda g: (_sum_to(g * const, a.shape),))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise FloatingPointError("log of non-positive value")
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def log_sigmoid(x: Tensor) -> Tensor:
    """``log(sigmoid(x))`` evaluated without overflow."""
    return _node(log_expit(x.data), (x,), lambda g: (g * expit(-x.data),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


def tsum(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), backward)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    return _node(x.data.mean(), (x,), lambda g: (np.full(x.shape, g / n),))


# --------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class Mask:
    """Raster-order autoregressive kernel mask.

    Kind ``"A"`` hides the centre and every later entry; kind ``"B"`` keeps
    the centre.
    """

    size: int
    kind: str
    array: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.size % 2 != 1:
            raise ValueError("mask size must be odd")
        if self.kind not in ("A", "B"):
            raise ValueError("mask kind must be 'A' or 'B'")
        c = self.size // 2
        m = np.zeros((self.size, self.size))
        m[:c, :] = 1.0
        m[c, :c] = 1.0
        if self.kind == "B":
            m[c, c] = 1.0
        object.__setattr__(self, "array", m)


def _pad(x: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return x
    width = ((0, 0), (0, 0), (p, p), (p, p))
    return np.pad(x, width, mode="wrap" if mode == "circular" else "constant")


def _correlate(x: np.ndarray, w: np.ndarray, mode: str) -> np.ndarray:
    """Same-size cross-correlation of ``(B,C,H,W)`` with ``(O,C,k,k)``."""
    k = w.shape[-1]
    win = sliding_window_view(_pad(x, k // 2, mode), (k, k), axis=(2, 3))
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    mask: Mask | None = None,
    padding: str = "circular",
) -> Tensor:
    """Stride-1, same-size 2D convolution.

    ``padding="circular"`` wraps around the torus; ``"zeros"`` pads with 0,
    which masked (autoregressive) layers require. Kernel taps that can only
    ever see padding are skipped.
    """
    if padding not in ("circular", "zeros"):
        raise ValueError(f"unknown padding {padding!r}")
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError("conv2d expects (B,C,H,W) input and (O,C,k,k) kernel")
    O, C, k, k2 = weight.shape
    if k != k2 or k % 2 != 1:
        raise ValueError("kernel must be square with odd size")
    if x.shape[1] != C:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {C}")
    H, W = x.shape[2:]
    if mask is not None and mask.size != k:
        raise ValueError("mask size does not match kernel")

    w = weight.data if mask is None else weight.data * mask.array
    crop = 0
    if padding == "zeros":
        kc = min(k, 2 * max(H, W) - 1)
        crop = (k - kc) // 2
        if crop:
            w = w[:, :, crop : k - crop, crop : k - crop]
    w = np.ascontiguousarray(w)
    out = _correlate(x.data, w, padding)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gx = None
        if x.requires_grad:
            gx = _correlate(g, np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)), padding)
        kc = w.shape[-1]
        win = sliding_window_view(_pad(x.data, kc // 2, padding), (kc, kc), axis=(2, 3))
        gw_c = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gw = np.zeros(weight.shape)
        gw[:, :, crop : k - crop, crop : k - crop] = gw_c
        if mask is not None:
            gw *= mask.array
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _node(out, parents, backward)


# --------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0


def adam_init(params) -> AdamState:
    return AdamState([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(
    params,
    grads,
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """In-place bias-corrected Adam update of ``params`` (a list of Tensors)."""
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {i}")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state
