"""Dense float64 tensors with reverse-mode autodiff.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record their parents and a backward closure; :func:`backprop` walks
the recorded graph in reverse topological order. Operations on tensors that
do not require gradients record nothing, so inference through frozen
networks carries no graph overhead.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from fcx.errors import (
    InvalidGeometry,
    InvalidLabel,
    InvalidShape,
    NotScalar,
    ShapeMismatch,
    ValidationError,
)

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# --- construction ---------------------------------------------------------

def new_tensor(shape: Sequence[int], init="zeros", seed: int = 0,
               requires_grad: bool = False) -> Tensor:
    """Create a tensor.

    ``init`` is one of ``"zeros"``, ``("constant", v)``, ``("uniform", a, b)``
    or ``("he_normal", fan_in)``. Random inits draw from
    ``np.random.default_rng(seed)`` so a fixed (init, seed) pair is
    reproducible bit for bit.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise InvalidShape(f"extents must be >= 1, got {shape}")
    kind, *args = (init,) if isinstance(init, str) else tuple(init)
    if kind == "zeros":
        data = np.zeros(shape, dtype=DTYPE)
    elif kind == "constant":
        data = np.full(shape, float(args[0]), dtype=DTYPE)
    elif kind == "uniform":
        a, b = args
        data = np.random.default_rng(seed).uniform(a, b, size=shape)
    elif kind == "he_normal":
        (fan_in,) = args
        data = np.random.default_rng(seed).normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    else:
        raise ValidationError(f"unknown init {init!r}")
    return Tensor(data, requires_grad=requires_grad)


# --- elementwise / structural ---------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, s: float) -> Tensor:
    return _node(a.data * s, (a,), lambda g: (g * s,))


def tsum(a: Tensor) -> Tensor:
    return _node(np.asarray(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, a.shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    n = a.size
    return _node(np.asarray(a.data.mean()), (a,),
                 lambda g: (np.full(a.shape, float(g) / n),))


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    """Collapse every axis but the first."""
    return reshape(a, (a.shape[0], -1))


def stack_mean(xs: Sequence[Tensor]) -> Tensor:
    """Elementwise arithmetic mean of equally shaped tensors."""
    out = xs[0]
    for x in xs[1:]:
        out = out + x
    return scale(out, 1.0 / len(xs))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def shortcut(x: Tensor, stride: int, cout: int) -> Tensor:
    """Parameter-free residual shortcut: spatial subsampling plus zero channels."""
    n, c, h, w = x.shape
    if cout < c:
        raise ShapeMismatch(f"shortcut cannot shrink channels {c} -> {cout}")
    sub_ = x.data[:, :, ::stride, ::stride]
    out = np.zeros((n, cout) + sub_.shape[2:], dtype=DTYPE)
    out[:, :c] = sub_

    def backward(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        gx[:, :, ::stride, ::stride] = g[:, :c]
        return (gx,)

    return _node(out, (x,), backward)


# --- linear maps ----------------------------------------------------------

def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeMismatch(f"affine: x{x.shape} @ W{W.shape}")
    if b.shape != (W.shape[1],):
        raise ShapeMismatch(f"affine: bias {b.shape} vs out {W.shape[1]}")
    out = x.data @ W.data + b.data

    def backward(g):
        return (g @ W.data.T if x.requires_grad else None,
                x.data.T @ g if W.requires_grad else None,
                g.sum(axis=0) if b.requires_grad else None)

    return _node(out, (x, W, b), backward)


def _pads(pad) -> tuple[int, int]:
    if isinstance(pad, (tuple, list)):
        lo, hi = pad
        return int(lo), int(hi)
    return int(pad), int(pad)


def conv_out_extent(size: int, k: int, stride: int, pad) -> int:
    lo, hi = _pads(pad)
    span = size + lo + hi - k
    if span < 0 or span % stride:
        raise InvalidGeometry(
            f"extent {size} with k={k}, stride={stride}, pad={pad} is not integral")
    return span // stride + 1


def conv2d(x: Tensor, K: Tensor, b: Tensor, stride: int = 1, pad=0) -> Tensor:
    """Cross-correlation over NCHW input.

    ``pad`` is either an int (symmetric) or a ``(before, after)`` pair applied
    to both spatial axes.
    """
    if x.data.ndim != 4 or K.data.ndim != 4:
        raise ShapeMismatch(f"conv2d: x{x.shape}, K{K.shape}")
    n, cin, h, w = x.shape
    cout, kc, kh, kw = K.shape
    if kc != cin or kh != kw:
        raise ShapeMismatch(f"conv2d: x{x.shape} vs K{K.shape}")
    if kh % 2 != 1:
        raise InvalidGeometry(f"kernel size must be odd, got {kh}")
    if b.shape != (cout,):
        raise ShapeMismatch(f"conv2d: bias {b.shape} vs cout {cout}")
    k = kh
    ho = conv_out_extent(h, k, stride, pad)
    wo = conv_out_extent(w, k, stride, pad)
    lo, hi = _pads(pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (lo, hi), (lo, hi))) if (lo or hi) else x.data
    if k == 1:
        cols = xp[:, :, ::stride, ::stride].transpose(0, 2, 3, 1).reshape(-1, cin)
    else:
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * k * k)
    Kmat = K.data.reshape(cout, -1)
    out = (cols @ Kmat.T + b.data).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gK = (gmat.T @ cols).reshape(K.shape) if K.requires_grad else None
        gb = gmat.sum(axis=0) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = np.ascontiguousarray(
                (gmat @ Kmat).reshape(n, ho, wo, cin, k, k).transpose(4, 5, 0, 3, 1, 2))
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[i, j]
            gx = gxp[:, :, lo:lo + h, lo:lo + w]
        return gx, gK, gb

    return _node(np.ascontiguousarray(out), (x, K, b), backward)


# --- losses ---------------------------------------------------------------

def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"mse: {a.shape} vs {b.shape}")
    d = a.data - b.data
    n = d.size
    return _node(np.asarray(np.mean(d * d)), (a, b),
                 lambda g: (2.0 * float(g) / n * d, -2.0 * float(g) / n * d))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"cross-entropy: logits {logits.shape}, labels {labels.shape}")
    n, C = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise InvalidLabel(f"labels must lie in [0, {C})")
    lsm = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -lsm[rows, labels].mean()

    def backward(g):
        p = np.exp(lsm)
        p[rows, labels] -= 1.0
        return (p * (float(g) / n),)

    return _node(np.asarray(loss), (logits,), backward)


# --- backprop -------------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backprop(loss: Tensor, params: Iterable[Tensor] = ()) -> list[np.ndarray]:
    """Populate ``.grad`` on every trainable leaf reachable from ``loss``.

    Gradients are overwritten, never accumulated across calls. Every tensor in
    ``params`` receives a gradient, zeros if ``loss`` does not depend on it;
    the gradients of ``params`` are returned in order.
    """
    if loss.data.ndim != 0:
        raise NotScalar(f"loss must be a scalar, got shape {loss.shape}")
    params = list(params)
    for p in params:
        p.grad = None
    order = _topo(loss) if loss.requires_grad else []
    for node in order:
        node.grad = None
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            node.grad = g if g is not None else np.zeros(node.shape, dtype=DTYPE)
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    for p in params:
        if p.grad is None:
            p.grad = np.zeros(p.shape, dtype=DTYPE)
    return [p.grad for p in params]
