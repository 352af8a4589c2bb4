"""Minimal reverse-mode automatic differentiation on numpy arrays.

Just enough machinery to train the toy encoder: a Tensor wraps a float64
ndarray and remembers how it was produced, and backward() walks the tape
in reverse topological order. Every primitive carries a hand-written
vector-Jacobian product; the test suite checks each one against central
finite differences, which is the correctness contract for this module.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Vjp = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Node in the computation graph.

    Gradients accumulate into ``grad`` across backward() calls, so leaf
    tensors can be shared between several per-utterance graphs within one
    training step. Callers zero grads between steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), vjp: Vjp | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(seed)/d(leaf) into every reachable leaf's ``grad``.

        ``grad`` is the gradient of the final scalar objective with respect
        to this tensor; it defaults to 1 for scalar outputs.
        """
        if not self.requires_grad:
            return
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.data.shape:
            raise ValueError(f"seed gradient shape {grad.shape} != tensor shape {self.data.shape}")

        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad = self.grad + grad

        for node in _toposort(self):
            if node._vjp is None or node.grad is None:
                continue
            parent_grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g
            if node is not self:
                # Intermediate grads are not part of the public contract;
                # free them so long training runs don't hold whole tapes.
                node.grad = None


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order (consumers before producers) from root."""
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp: Vjp) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, vjp=vjp)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    """Elementwise (broadcasting) product; also covers scaling by a constant."""
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make(out, (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), vjp)


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0)

    def vjp(g):
        return (g * mask,)

    return _make(out, (a,), vjp)


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    a = _wrap(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inv),)

    return _make(out, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _make(out, (a,), vjp)


def index(a, key) -> Tensor:
    """Basic (slice/int) indexing. Fancy indexing is not supported because
    its scatter-gradient would need duplicate handling."""
    a = _wrap(a)
    out = a.data[key].copy()

    def vjp(g):
        z = np.zeros_like(a.data)
        z[key] = g
        return (z,)

    return _make(out, (a,), vjp)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(parts)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _make(out, tuple(parts), vjp)


def softmax(a) -> Tensor:
    """Row softmax over the last axis."""
    a = _wrap(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), vjp)


def log_softmax(a) -> Tensor:
    """Row log-softmax over the last axis; rows of exp(out) sum to 1."""
    a = _wrap(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), vjp)


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize each row (last axis) to zero mean / unit variance, then
    apply a learned elementwise affine."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        dgain = _unbroadcast(g * xhat, gain.data.shape)
        dbias = _unbroadcast(g, bias.data.shape)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgain, dbias

    return _make(out, (x, gain, bias), vjp)


def conv2d(x, w, b, stride: int = 2) -> Tensor:
    """2-D convolution with odd square-ish kernel and half padding.

    ``x`` is (T, F, Cin), ``w`` is (kh, kw, Cin, Cout), ``b`` is (Cout,).
    Output is (ceil(T/stride), ceil(F/stride), Cout).
    """
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    T, F, cin = x.data.shape
    kh, kw, wcin, cout = w.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d expects odd kernel sizes")
    if wcin != cin:
        raise ValueError(f"conv2d channel mismatch: input {cin}, kernel {wcin}")
    ph, pw = kh // 2, kw // 2
    to = (T - 1) // stride + 1
    fo = (F - 1) // stride + 1
    xp = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0)))

    patches = np.empty((to, fo, kh, kw, cin))
    for di in range(kh):
        for dj in range(kw):
            patches[:, :, di, dj, :] = xp[di : di + stride * to : stride, dj : dj + stride * fo : stride, :]
    wm = w.data.reshape(kh * kw * cin, cout)
    out = (patches.reshape(to * fo, -1) @ wm + b.data).reshape(to, fo, cout)

    def vjp(g):
        gm = g.reshape(to * fo, cout)
        dw = (patches.reshape(to * fo, -1).T @ gm).reshape(w.data.shape)
        db = gm.sum(axis=0)
        dp = (gm @ wm.T).reshape(to, fo, kh, kw, cin)
        dxp = np.zeros_like(xp)
        for di in range(kh):
            for dj in range(kw):
                dxp[di : di + stride * to : stride, dj : dj + stride * fo : stride, :] += dp[:, :, di, dj, :]
        dx = dxp[ph : ph + T, pw : pw + F, :]
        return dx, dw, db

    return _make(out, (x, w, b), vjp)


def sum_all(a) -> Tensor:
    a = _wrap(a)
    out = np.asarray(a.data.sum())

    def vjp(g):
        return (np.full_like(a.data, float(g)),)

    return _make(out, (a,), vjp)
