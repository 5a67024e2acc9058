"""Reverse-mode automatic differentiation on numpy arrays.

A Tensor records its parents and a backward closure when created by an
operation; creation order doubles as the tape, so backpropagation walks
node ids in reverse. Operations that reach no gradient-requiring leaf are
constant-folded (no tape entry). Values keep the dtype they were created
with: float32 for training buffers, float64 when a caller wants a
high-precision oracle pass through the same code.
"""

from __future__ import annotations

import itertools

import numpy as np

_TID = itertools.count()


class Tensor:
    """Array node on the autodiff tape."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "tid")

    def __init__(self, value, requires_grad=False, parents=(), backward=None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = tuple(parents) if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None
        self.tid = next(_TID)

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Backpropagate from a scalar output to every reachable leaf."""
        if self.value.size != 1:
            raise ValueError("backward requires a scalar output")
        nodes = {}
        stack = [self]
        while stack:
            n = stack.pop()
            if n.tid not in nodes:
                nodes[n.tid] = n
                stack.extend(n._parents)
        self._accum(np.ones_like(self.value))
        for n in sorted(nodes.values(), key=lambda n: n.tid, reverse=True):
            if n._backward is not None and n.grad is not None:
                n._backward(n.grad)

    # Operator sugar; scalars and ndarrays are wrapped as constants.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return Tensor(arr)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast-result gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, a.dtype)
    out = Tensor(a.value + b.value, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    out._backward = backward if out.requires_grad else None
    return out


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = Tensor(a.value * b.value, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.value, b.shape))

    out._backward = backward if out.requires_grad else None
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul expects 2D operands")
    out = Tensor(a.value @ b.value, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.value.T)
        if b.requires_grad:
            b._accum(a.value.T @ g)

    out._backward = backward if out.requires_grad else None
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.value.reshape(shape), parents=(a,))

    def backward(g):
        a._accum(g.reshape(a.shape))

    out._backward = backward if out.requires_grad else None
    return out


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.value[key], parents=(a,))

    def backward(g):
        gp = np.zeros_like(a.value)
        if isinstance(key, np.ndarray) or (
            isinstance(key, tuple) and any(isinstance(k, np.ndarray) for k in key)
        ):
            np.add.at(gp, key, g)
        else:
            gp[key] += g
        a._accum(gp)

    out._backward = backward if out.requires_grad else None
    return out


def concat(parts, axis=0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.value for p in parts], axis=axis), parents=tuple(parts))
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for p, gp in zip(parts, np.split(g, splits, axis=axis)):
            if p.requires_grad:
                p._accum(gp)

    out._backward = backward if out.requires_grad else None
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    out = Tensor(np.where(mask, a.value, np.zeros((), dtype=a.dtype)), parents=(a,))

    def backward(g):
        a._accum(g * mask)

    out._backward = backward if out.requires_grad else None
    return out


def sin(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sin(a.value), parents=(a,))

    def backward(g):
        a._accum(g * np.cos(a.value))

    out._backward = backward if out.requires_grad else None
    return out


def cos(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.cos(a.value), parents=(a,))

    def backward(g):
        a._accum(-g * np.sin(a.value))

    out._backward = backward if out.requires_grad else None
    return out


def tsum(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.value.sum(axis=axes), parents=(a,))

    def backward(g):
        if axes is not None:
            g = np.expand_dims(g, axes)
        a._accum(np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))

    out._backward = backward if out.requires_grad else None
    return out


def tmean(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.value.mean(axis=axes), parents=(a,))
    count = a.value.size if axes is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axes)])

    def backward(g):
        if axes is not None:
            g = np.expand_dims(g, axes)
        a._accum((np.broadcast_to(g, a.shape) / count).astype(a.dtype, copy=False))

    out._backward = backward if out.requires_grad else None
    return out


def mse(a, b) -> Tensor:
    """Mean squared error over all entries, as a scalar Tensor."""
    d = a - as_tensor(b, as_tensor(a).dtype)
    return tmean(mul(d, d))


def linear(x, w, b) -> Tensor:
    """x @ w + b for x (B, in), w (in, out), b (out,)."""
    return add(matmul(x, w), b)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    b, c, _, _ = xp.shape
    cols = np.empty((b, c, kh, kw, out_h, out_w), dtype=xp.dtype)
    for ky in range(kh):
        for kx in range(kw):
            cols[:, :, ky, kx] = xp[:, :, ky: ky + stride * out_h: stride,
                                    kx: kx + stride * out_w: stride]
    return cols.reshape(b, c * kh * kw, out_h * out_w)


def conv2d(x, w, b, stride: int = 2, pad: int = 1) -> Tensor:
    """2D convolution: x (B, C_in, H, W), w (C_out, C_in, kh, kw), b (C_out,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    bs, c_in, h, wd = x.shape
    c_out, c_in_w, kh, kw = w.shape
    if c_in != c_in_w:
        raise ValueError(f"conv2d channel mismatch: input {c_in}, weight {c_in_w}")
    out_h = (h + 2 * pad - kh) // stride + 1
    out_w = (wd + 2 * pad - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ValueError(f"conv2d output would be empty for input {h}x{wd}")
    xp = np.pad(x.value, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.value
    cols = _im2col(xp, kh, kw, stride, out_h, out_w)
    w2 = w.value.reshape(c_out, -1)
    y = np.matmul(w2, cols) + b.value[:, None]
    out = Tensor(y.reshape(bs, c_out, out_h, out_w), parents=(x, w, b))

    def backward(g):
        g2 = g.reshape(bs, c_out, -1)
        if b.requires_grad:
            b._accum(g2.sum(axis=(0, 2)))
        if w.requires_grad:
            w._accum(np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2).reshape(bs, c_in, kh, kw, out_h, out_w)
            dxp = np.zeros_like(xp)
            for ky in range(kh):
                for kx in range(kw):
                    dxp[:, :, ky: ky + stride * out_h: stride,
                        kx: kx + stride * out_w: stride] += dcols[:, :, ky, kx]
            x._accum(dxp[:, :, pad: pad + h, pad: pad + wd] if pad else dxp)

    out._backward = backward if out.requires_grad else None
    return out


def global_avg_pool(x) -> Tensor:
    """Mean over the spatial axes of x (B, C, H, W), giving (B, C)."""
    return tmean(x, axes=(2, 3))


def grad_check(f, point: np.ndarray, step: float | None = None) -> float:
    """Max relative error between autodiff and central-difference gradients.

    `f` maps a leaf Tensor of `point`'s shape to a scalar Tensor and must be
    dtype-generic: the finite-difference oracle always runs the function in
    float64, while the autodiff gradient is taken at `point`'s own dtype.
    Relative error per coordinate is |auto - fd| / (|auto| + |fd| + 1e-12).
    Callers should keep check points away from rectifier kinks.
    """
    point = np.asarray(point)
    leaf = Tensor(point.copy(), requires_grad=True)
    out = f(leaf)
    if out.value.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    out.backward()
    auto = leaf.grad.astype(np.float64).ravel()

    flat = point.astype(np.float64).ravel()
    h = step if step is not None else 1e-5 * max(1.0, float(np.max(np.abs(flat))))
    fd = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        hi = float(f(Tensor(bumped.reshape(point.shape))).value)
        bumped[i] = flat[i] - h
        lo = float(f(Tensor(bumped.reshape(point.shape))).value)
        fd[i] = (hi - lo) / (2.0 * h)
    rel = np.abs(auto - fd) / (np.abs(auto) + np.abs(fd) + 1e-12)
    return float(rel.max())
