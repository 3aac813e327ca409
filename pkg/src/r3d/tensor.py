"""Reverse-mode autodiff over numpy arrays.

Define-by-run: every op records its parents and a backward closure on the
output Tensor. backward() on a scalar loss topologically sorts the graph and
accumulates gradients additively into every requires_grad node, so parameters
shared across uses (or across backward calls) sum their gradients; the caller
zeroes them between steps.

Only float32/float64 buffers are allowed and ops never mix precisions.
Python-float constants are used throughout so numpy does not silently promote
f32 graphs to f64.
"""

from __future__ import annotations

import math

import numpy as np

_GRAD_ENABLED = True

SQRT_2_OVER_PI = 0.7978845608028654  # sqrt(2/pi), gelu tanh constant
GELU_CUBIC = 0.044715


class no_grad:
    """Context manager that disables graph recording (inference fast path)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _coerce(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype == np.float32 or arr.dtype == np.float64:
        return arr
    if arr.dtype.kind in "iub":
        return arr.astype(np.float32)
    if arr.dtype.kind == "f":
        return arr.astype(np.float32)
    raise TypeError(f"unsupported dtype {arr.dtype}")


class Tensor:
    """A numpy array plus graph bookkeeping (parents, backward closure)."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _bwd=None):
        self.data = _coerce(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._bwd = _bwd

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def precision(self) -> str:
        return "f32" if self.data.dtype == np.float32 else "f64"

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, {self.precision}, grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def assert_finite(self, what: str = "tensor"):
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in {what}")
        return self

    # -- graph ------------------------------------------------------------

    def backward(self):
        """Backprop from this scalar; accumulates into .grad of graph nodes."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor with no graph")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, ready = stack.pop()
            if ready:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bwd is not None:
                node._bwd(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_wrap(other, self), -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


class Parameter(Tensor):
    """A named leaf tensor; names are unique within a ParamStore."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, {self.precision})"


class ParamStore:
    """Ordered name -> Parameter mapping; rejects duplicate names."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, data) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grads(self):
        for p in self._params.values():
            p.grad = None

    def n_values(self) -> int:
        return sum(p.data.size for p in self._params.values())


# -- op plumbing -----------------------------------------------------------


def _np_const(x) -> Tensor:
    return Tensor(np.asarray(x))


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _check_dtypes(*ts: Tensor):
    d0 = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != d0:
            raise TypeError(f"mixed precisions {d0} and {t.data.dtype}")


def _make(data: np.ndarray, parents: tuple[Tensor, ...], bwd) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _bwd=bwd)
    return Tensor(data)


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (reverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise / structural ops -------------------------------------------


def add(a: Tensor, b) -> Tensor:
    """Broadcasting add; grads are summed back down to each input's shape."""
    b = _wrap(b, a)
    _check_dtypes(a, b)
    out_data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    """Broadcasting elementwise multiply."""
    b = _wrap(b, a)
    _check_dtypes(a, b)
    out_data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bwd)


def square(a: Tensor) -> Tensor:
    out_data = a.data * a.data

    def bwd(g):
        _accum(a, g * (2.0 * a.data))

    return _make(out_data, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul on [..., m, k] @ [..., k, n]; leading dims broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects rank >= 2 on both sides")
    _check_dtypes(a, b)
    out_data = a.data @ b.data

    def bwd(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = a.data.transpose(axes)

    def bwd(g):
        _accum(a, g.transpose(inv))

    return _make(out_data, (a,), bwd)


def getitem(a: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing; selected region receives the gradient."""
    out_data = a.data[key]

    def bwd(g):
        gx = np.zeros_like(a.data)
        gx[key] += g
        _accum(a, gx)

    return _make(out_data, (a,), bwd)


def take(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along axis 0 (embedding lookup); scatter-adds on backward."""
    idx = np.asarray(idx)
    out_data = a.data[idx]

    def bwd(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, idx, g)
        _accum(a, gx)

    return _make(out_data, (a,), bwd)


def concat(ts: list[Tensor], axis: int = 0) -> Tensor:
    _check_dtypes(*ts)
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _make(out_data, tuple(ts), bwd)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False))

    return _make(out_data, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


def tmax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max-reduce along one axis; gradient routes to the first argmax."""
    idx = np.argmax(a.data, axis=axis)
    out_data = np.max(a.data, axis=axis, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        onehot = np.zeros_like(a.data)
        np.put_along_axis(onehot, np.expand_dims(idx, axis), 1.0, axis)
        _accum(a, onehot * g)

    return _make(out_data, (a,), bwd)


# -- nonlinear ops -----------------------------------------------------------


def gelu(a: Tensor) -> Tensor:
    """gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))), tanh form."""
    x = a.data
    u = SQRT_2_OVER_PI * (x + GELU_CUBIC * (x * x * x))
    t = np.tanh(u)
    out_data = 0.5 * x * (1.0 + t)

    def bwd(g):
        du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * (x * x))
        gx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        _accum(a, g * gx)

    return _make(out_data, (a,), bwd)


def _layer_norm_backward(g, xhat, rstd, gamma):
    """Input gradient of layer norm; split out so tests can stub it."""
    gh = g * gamma
    m1 = gh.mean(axis=-1, keepdims=True)
    m2 = (gh * xhat).mean(axis=-1, keepdims=True)
    return rstd * (gh - m1 - xhat * m2)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    _check_dtypes(a, gamma, beta)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out_data = xhat * gamma.data + beta.data

    def bwd(g):
        lead = (-1, x.shape[-1])
        _accum(gamma, (g * xhat).reshape(lead).sum(axis=0))
        _accum(beta, g.reshape(lead).sum(axis=0))
        _accum(a, _layer_norm_backward(g, xhat, rstd, gamma.data))

    return _make(out_data, (a, gamma, beta), bwd)


def softmax(a: Tensor, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Softmax along `axis`; mask=False entries get exactly zero probability.

    The max-subtraction for stability runs over allowed entries only, so a
    huge masked score cannot poison the row. A fully masked row is an error.
    """
    x = a.data
    if mask is None:
        m = x.max(axis=axis, keepdims=True)
        e = np.exp(x - m)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("softmax row with all entries masked")
        neg = np.where(mask, x, -np.inf)
        m = neg.max(axis=axis, keepdims=True)
        e = np.exp(np.where(mask, x - m, 0.0))
        e = np.where(mask, e, 0.0)
    p = e / e.sum(axis=axis, keepdims=True)
    p = p.astype(x.dtype, copy=False)

    def bwd(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        _accum(a, p * (g - dot))

    return _make(p, (a,), bwd)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log likelihood of integer labels under row softmax."""
    x = logits.data
    labels = np.asarray(labels)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise ValueError("cross_entropy expects logits [N, C] and labels [N]")
    n = x.shape[0]
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    nll = lse[:, 0] - z[np.arange(n), labels]
    out_data = np.asarray(nll.mean(), dtype=x.dtype)

    def bwd(g):
        p = np.exp(z - lse)
        p[np.arange(n), labels] -= 1.0
        _accum(logits, p * (float(g) / n))

    return _make(out_data, (logits,), bwd)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    return tmean(square(add(a, mul(b, -1.0))))
