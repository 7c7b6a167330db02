"""Small reverse-mode autodiff on top of numpy.

Every operation returns a new :class:`Tensor`.  When at least one input
requires a gradient, the result remembers its parents and a backward rule;
the recorded graph is the tape.  Node ids grow monotonically, so sorting the
reachable nodes by id gives a valid replay order.
"""

from __future__ import annotations

import itertools
import threading
import warnings
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .errors import (
    DegenerateSpectrumError,
    NonFiniteError,
    ShapeError,
    SingularSystemError,
)

__all__ = [
    "Tensor", "Tape", "tensor", "as_tensor", "no_grad", "grad",
    "add", "sub", "mul", "div", "neg", "matmul", "power",
    "exp", "log", "sqrt", "sin", "cos", "arccos", "relu", "sigmoid", "clip",
    "tsum", "mean", "reshape", "transpose", "concat", "stack", "scatter",
    "softmax", "logsumexp", "linear", "skew", "norm",
    "svd_min_singular_vector", "linear_solve", "gradcheck",
]

_ids = itertools.count()
_state = threading.local()

SVD_GAP_TOL = 1e-9
PIVOT_TOL = 1e-12


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._id = next(_ids)
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def backward(self, seed=None) -> "Tape":
        tape = Tape.from_output(self)
        tape.backward(seed)
        return tape

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: tuple, backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    data = np.asarray(data, dtype=np.float64)
    data.flags.writeable = False
    out.data = data
    out.grad = None
    out._id = next(_ids)
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


class Tape:
    """Ordered record of the operations that produced an output."""

    def __init__(self, output: Tensor, nodes: list):
        self.output = output
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        seen = {}
        stack = [output]
        while stack:
            node = stack.pop()
            if node._id in seen or not node.requires_grad:
                continue
            seen[node._id] = node
            stack.extend(node._parents)
        return cls(output, [seen[k] for k in sorted(seen)])

    @property
    def leaves(self) -> list:
        return [n for n in self.nodes if n._backward is None]

    def __len__(self):
        return len(self.nodes)

    def backward(self, seed=None) -> None:
        out = self.output
        if seed is None:
            if out.data.size != 1:
                raise ShapeError("backward (seed required for non-scalar output)", out.shape)
            seed = np.ones_like(out.data)
        grads = {out._id: np.asarray(seed, dtype=np.float64)}
        for node in reversed(self.nodes):
            g = grads.pop(node._id, None)
            if node._backward is None:
                node.grad = np.zeros_like(node.data) if g is None else g
                continue
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if not np.all(np.isfinite(pg)):
                    raise NonFiniteError(node.op, "backward")
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg


def grad(output: Tensor, inputs: Sequence[Tensor]) -> list:
    """Gradients of a scalar ``output`` with respect to ``inputs``."""
    for x in inputs:
        x.grad = None
    output.backward()
    return [np.zeros_like(x.data) if x.grad is None else x.grad for x in inputs]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _binary(op, a, b, fwd):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(op, a.shape, b.shape) from exc
    return a, b, data


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b, data = _binary("add", a, b, np.add)
    return _make("add", data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b, data = _binary("sub", a, b, np.subtract)
    return _make("sub", data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b, data = _binary("mul", a, b, np.multiply)
    return _make("mul", data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b, data = _binary("div", a, b, np.divide)

    def back(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * data, b.shape)

    return _make("div", data, (a, b), back)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    data = a.data ** p
    return _make("power", data, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)
    return _make("exp", data, (a,), lambda g: (g * data,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g / a.data,)

    return _make("log", data, (a,), back)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        data = np.sqrt(a.data)

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g * 0.5 / data,)

    return _make("sqrt", data, (a,), back)


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make("sin", np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make("cos", np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def arccos(a) -> Tensor:
    """Inverse cosine; inputs must lie strictly inside (-1, 1) for a gradient."""
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        data = np.arccos(a.data)

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (-g / np.sqrt(1.0 - a.data ** 2),)

    return _make("arccos", data, (a,), back)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make("sigmoid", data, (a,), lambda g: (g * data * (1.0 - data),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp; the gradient is zero where the clamp is active."""
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _make("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


# -- reductions and shape ----------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", data, (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", a.shape, shape) from exc
    return _make("reshape", data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        # swap the trailing two axes; batch axes stay put
        axes = tuple(range(a.ndim))
        if a.ndim >= 2:
            axes = axes[:-2] + (axes[-1], axes[-2])
    inv = np.argsort(axes)
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        raise TypeError("index with numpy arrays, not tensors")
    data = a.data[idx]

    def back(g):
        out = np.zeros(a.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make("getitem", data, (a,), back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", *[t.shape for t in ts]) from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make("concat", data, tuple(ts), lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        data = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError("stack", *[t.shape for t in ts]) from exc
    n = len(ts)
    return _make("stack", data, tuple(ts),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def scatter(shape: tuple, index, values) -> Tensor:
    """Zeros of ``shape`` with ``values`` added at ``index`` (numpy fancy index)."""
    values = as_tensor(values)
    out = np.zeros(shape)
    try:
        np.add.at(out, index, values.data)
    except (ValueError, IndexError) as exc:
        raise ShapeError("scatter", shape, values.shape) from exc
    return _make("scatter", out, (values,), lambda g: (g[index].reshape(values.shape),))


# -- linear algebra and composites -------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul", a.shape, b.shape)
    a2 = a.data[None, :] if a.ndim == 1 else a.data
    b2 = b.data[:, None] if b.ndim == 1 else b.data
    try:
        data = np.matmul(a2, b2)
    except ValueError as exc:
        raise ShapeError("matmul", a.shape, b.shape) from exc
    out_shape = data.shape
    if a.ndim == 1:
        out_shape = out_shape[:-2] + out_shape[-1:]
    if b.ndim == 1:
        out_shape = out_shape[:-1]

    def back(g):
        g2 = g.reshape(data.shape)
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        ga = _unbroadcast(ga, a2.shape).reshape(a.shape)
        gb = _unbroadcast(gb, b2.shape).reshape(b.shape)
        return ga, gb

    return _make("matmul", data.reshape(out_shape), (a, b), back)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` for row-major batches of features."""
    out = matmul(x, transpose(weight, (1, 0)))
    return out if bias is None else add(out, bias)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (data * (g - (g * data).sum(axis=axis, keepdims=True)),)

    return _make("softmax", data, (a,), back)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m)
    tot = s.sum(axis=axis, keepdims=True)
    data = np.log(tot) + m
    p = s / tot
    if not keepdims:
        data = np.squeeze(data, axis=axis)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * p,)

    return _make("logsumexp", data, (a,), back)


def skew(v) -> Tensor:
    """Cross-product matrices ``[v]x`` for a (..., 3) input, shape (..., 3, 3)."""
    v = as_tensor(v)
    if v.shape[-1] != 3:
        raise ShapeError("skew", v.shape)
    x, y, z = v.data[..., 0], v.data[..., 1], v.data[..., 2]
    o = np.zeros_like(x)
    data = np.stack([
        np.stack([o, -z, y], -1),
        np.stack([z, o, -x], -1),
        np.stack([-y, x, o], -1),
    ], -2)

    def back(g):
        return (np.stack([
            g[..., 2, 1] - g[..., 1, 2],
            g[..., 0, 2] - g[..., 2, 0],
            g[..., 1, 0] - g[..., 0, 1],
        ], -1),)

    return _make("skew", data, (v,), back)


def norm(a, axis=None, keepdims: bool = False) -> Tensor:
    return sqrt(tsum(mul(a, a), axis, keepdims))


def svd_min_singular_vector(a) -> Tensor:
    """Unit right singular vector of ``a`` (m x n) for its smallest singular value.

    Sign is fixed so the largest-magnitude entry is positive.  The backward
    rule is the eigenvector perturbation of ``a.T @ a``; it needs the smallest
    singular value to be simple.
    """
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] < a.shape[1] - 1:
        raise ShapeError("svd_min_singular_vector", a.shape)
    m, n = a.shape
    _, s, vt = np.linalg.svd(a.data, full_matrices=True)
    if len(s) < n:
        s = np.concatenate([s, np.zeros(n - len(s))])
    scale = max(1.0, float(s[0]))
    gap = float(s[-2] - s[-1])
    if gap <= SVD_GAP_TOL * scale:
        raise DegenerateSpectrumError(gap, scale)
    v = vt[-1].copy()
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    others = vt[:-1]
    denom = s[-1] ** 2 - s[:-1] ** 2

    def back(g):
        h = others.T @ ((others @ g) / denom)
        return (a.data @ (np.outer(v, h) + np.outer(h, v)),)

    return _make("svd_min_singular_vector", v, (a,), back)


def linear_solve(m, b) -> Tensor:
    """Solve ``m @ x = b`` by LU with partial pivoting; differentiable in both."""
    m, b = as_tensor(m), as_tensor(b)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or b.shape[0] != m.shape[0]:
        raise ShapeError("linear_solve", m.shape, b.shape)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(m.data, check_finite=False)
    diag = np.abs(np.diag(lu))
    bad = np.flatnonzero(diag < PIVOT_TOL)
    if bad.size:
        raise SingularSystemError(int(bad[0]), float(lu[bad[0], bad[0]]))
    x = scipy.linalg.lu_solve((lu, piv), b.data, check_finite=False)

    def back(g):
        gb = scipy.linalg.lu_solve((lu, piv), g, trans=1, check_finite=False)
        gm = -(np.outer(gb, x) if x.ndim == 1 else gb @ x.T)
        return gm, gb

    return _make("linear_solve", x, (m, b), back)


def gradcheck(fn: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    x = np.array(x, dtype=np.float64)
    xt = Tensor(x, requires_grad=True)
    out = fn(xt)
    if out.data.size != 1:
        raise ShapeError("gradcheck (scalar output required)", out.shape)
    (analytic,) = grad(out, [xt])
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    for k in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[k] += step
        minus[k] -= step
        with no_grad():
            fp = fn(Tensor(plus.reshape(x.shape))).item()
            fm = fn(Tensor(minus.reshape(x.shape))).item()
        numeric.reshape(-1)[k] = (fp - fm) / (2 * step)
    if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(analytic))):
        raise NonFiniteError("gradcheck")
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))
