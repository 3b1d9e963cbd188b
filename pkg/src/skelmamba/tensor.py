"""Dense n-dimensional tensors with define-by-run reverse-mode differentiation.

Every primitive records its parents and a closure mapping the output gradient
to parent gradients. Nodes carry a global sequence number; ``backward`` visits
the reachable nodes in descending sequence order, which is exactly the reverse
of execution order.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import ndtr

from .errors import ConfigError, DimensionError, NumericError, UsageError

_SEQ = itertools.count()
_GRAD_ENABLED = True

# Verify finiteness of every forward output and every accumulated gradient.
CHECK_FINITE = True
# Ops that only move values cannot turn finite inputs into non-finite outputs.
_MOVE_OPS = frozenset({"reshape", "transpose", "flip", "broadcast_to", "getitem", "concat", "stack", "take", "scatter"})

_INV_SQRT_2PI = 0.3989422804014327


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _check_finite(arr: np.ndarray, what: str) -> None:
    # A single reduction propagates any NaN/inf; cheaper than isfinite().all().
    if arr.size and not np.isfinite(np.add.reduce(arr, axis=None)):
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite values produced by {what}")


class Tensor:
    """A real array that participates in the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "decay", "_parents", "_backward", "_seq", "_op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.decay = True
        self._parents: tuple[Tensor, ...] | None = None
        self._backward: Callable | None = None
        self._seq = next(_SEQ)
        self._op = "leaf"

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self._op})"

    def __len__(self) -> int:
        return self.shape[0]

    # --------------------------------------------------------------- backward
    def _reverse_order(self) -> list[Tensor]:
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            if node._parents:
                stack.extend(p for p in node._parents if p.requires_grad)
        nodes.sort(key=lambda n: n._seq, reverse=True)
        return nodes

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise UsageError("backward() called on a tensor that is not on the graph")
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in self._reverse_order():
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._parents is None:
                if CHECK_FINITE:
                    _check_finite(g, "backward")
                g = np.asarray(g, dtype=node.dtype)
                if g.shape != node.shape:
                    g = np.broadcast_to(g, node.shape)
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

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

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def parameter(data, decay: bool = True) -> Tensor:
    """Create a trainable leaf tensor."""
    t = Tensor(data, requires_grad=True)
    t.decay = decay
    return t


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    if CHECK_FINITE and op not in _MOVE_OPS:
        _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.decay = True
    out._seq = next(_SEQ)
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = None
        out._backward = None
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(a.data**p, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sin(a: Tensor) -> Tensor:
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def _expit(x: np.ndarray) -> np.ndarray:
    """Logistic function via tanh, which numpy evaluates vectorized and never overflows."""
    out = np.tanh(0.5 * x)
    out *= 0.5
    out += 0.5
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    s = _expit(a.data)

    def backward(g):
        return (g * s * (1.0 + a.data * (1.0 - s)),)

    return _make(a.data * s, (a,), backward, "silu")


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with Phi the standard normal CDF."""
    x = a.data
    cdf = ndtr(x)

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * x.dtype.type(_INV_SQRT_2PI)
        return (g * (cdf + x * pdf),)

    return _make(x * cdf, (a,), backward, "gelu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out.astype(x.dtype, copy=False), (a,), lambda g: (g * _expit(x),), "softplus")


ELEMENTWISE: dict[str, Callable] = {
    "gelu": gelu,
    "silu": silu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "exp": exp,
    "add": add,
    "mul": mul,
}


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch one of the named pointwise primitives."""
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise UsageError(f"unknown elementwise op {op!r}; expected one of {sorted(ELEMENTWISE)}") from None
    return fn(*operands)


# ------------------------------------------------------------------- linear
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    a = as_tensor(a)
    b = as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch extents not broadcastable: {a.shape} x {b.shape}") from None
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if b.ndim == 2:
            if a.requires_grad:
                ga = g @ b.data.T
            if b.requires_grad:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            if a.requires_grad:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


# --------------------------------------------------------------- reductions
def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _make(np.asarray(out), (a,), backward, "mean")


# ------------------------------------------------------------------ shapes
def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def flip(a: Tensor, axis: int) -> Tensor:
    return _make(np.flip(a.data, axis), (a,), lambda g: (np.flip(g, axis),), "flip")


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]
    basic = _is_basic_index(key)

    def backward(g):
        gx = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            gx[key] = g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    if basic:
        out = out.copy()
    return _make(np.asarray(out), (a,), backward, "getitem")


def _is_basic_index(key) -> bool:
    if not isinstance(key, tuple):
        key = (key,)
    return all(isinstance(k, (int, slice)) or k is None or k is Ellipsis for k in key)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}; shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack: {exc}") from None

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tuple(tensors), backward, "stack")


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Split along ``axis`` into consecutive slices of the given sizes."""
    axis = axis % a.ndim
    if sum(sizes) != a.shape[axis]:
        raise DimensionError(f"split sizes {list(sizes)} do not sum to extent {a.shape[axis]}")
    parts = []
    start = 0
    for s in sizes:
        key = (slice(None),) * axis + (slice(start, start + s),)
        parts.append(getitem(a, key))
        start += s
    return parts


def take(a: Tensor, index: Sequence[int], axis: int) -> Tensor:
    """Select positions ``index`` (no repeats) along ``axis``."""
    idx = np.asarray(index, dtype=np.intp)
    axis = axis % a.ndim
    out = np.take(a.data, idx, axis=axis)

    def backward(g):
        gx = np.zeros(a.shape, dtype=g.dtype)
        key = (slice(None),) * axis + (idx,)
        gx[key] = g
        return (gx,)

    return _make(out, (a,), backward, "take")


def scatter(a: Tensor, index: Sequence[int], axis: int, size: int) -> Tensor:
    """Place slices of ``a`` at positions ``index`` of a zero tensor of extent ``size``."""
    idx = np.asarray(index, dtype=np.intp)
    axis = axis % a.ndim
    shape = list(a.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=a.dtype)
    key = (slice(None),) * axis + (idx,)
    out[key] = a.data

    def backward(g):
        return (np.take(g, idx, axis=axis),)

    return _make(out, (a,), backward, "scatter")


# -------------------------------------------------------------- normalizers
def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"layernorm affine shapes {gain.shape}, {bias.shape} vs input {x.shape}")
    return _normalize(x, gain, bias, eps, axes=(x.ndim - 1,), op="layernorm")


def batch_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each channel (last axis) with statistics over every other axis."""
    return _normalize(x, gain, bias, eps, axes=tuple(range(x.ndim - 1)), op="batch_norm")


def _normalize(x: Tensor, gain: Tensor, bias: Tensor, eps: float, axes, op: str) -> Tensor:
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = ggain = gbias = None
        if gain.requires_grad:
            ggain = np.sum(g * xhat, axis=lead)
        if bias.requires_grad:
            gbias = np.sum(g, axis=lead)
        if x.requires_grad:
            gxhat = g * gain.data
            gx = inv * (
                gxhat
                - gxhat.mean(axis=axes, keepdims=True)
                - xhat * np.mean(gxhat * xhat, axis=axes, keepdims=True)
            )
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), backward, op)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


# ------------------------------------------------------------- convolution
def conv1d_grouped(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    groups: int = 1,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Grouped cross-correlation of ``x[..., C_in, T]`` with ``weight[C_out, C_in/groups, k]``."""
    c_in, t_len = x.shape[-2:]
    c_out, cin_g, k = weight.shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise ConfigError(f"conv1d: channels in={c_in}, out={c_out} not divisible by groups={groups}")
    if cin_g != c_in // groups:
        raise DimensionError(f"conv1d: weight {weight.shape} expects {cin_g * groups} input channels, got {c_in}")
    t_out = (t_len + 2 * padding - k) // stride + 1
    if t_out < 1:
        raise DimensionError(f"conv1d: output length {t_out} < 1 (T={t_len}, k={k}, pad={padding})")
    lead = x.shape[:-2]
    cout_g = c_out // groups
    pad = [(0, 0)] * (x.ndim - 1) + [(padding, padding)]
    xp = np.pad(x.data, pad) if padding else x.data
    win = sliding_window_view(xp, k, axis=-1)[..., ::stride, :][..., :t_out, :]
    win_g = win.reshape(lead + (groups, cin_g, t_out, k))
    w_g = weight.data.reshape(groups, cout_g, cin_g, k)
    out = np.einsum("...gctk,gock->...got", win_g, w_g, optimize=True).reshape(lead + (c_out, t_out))
    if bias is not None:
        out = out + bias.data[:, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g_g = g.reshape(lead + (groups, cout_g, t_out))
        gx = gw = None
        if weight.requires_grad:
            gw = np.einsum("...got,...gctk->gock", g_g, win_g, optimize=True).reshape(weight.shape)
        if x.requires_grad:
            gwin = np.einsum("...got,gock->...gctk", g_g, w_g, optimize=True)
            gwin = gwin.reshape(lead + (c_in, t_out, k))
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            span = stride * (t_out - 1) + 1
            for j in range(k):
                gxp[..., j : j + span : stride] += gwin[..., j]
            gx = gxp[..., padding : padding + t_len]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=tuple(range(len(lead))) + (g.ndim - 1,))

    return _make(np.ascontiguousarray(out), parents, backward, "conv1d")


# ----------------------------------------------------------- grad checking
def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
    stencil: int = 3,
) -> float:
    """Worst relative error between backward() and central differences of ``f`` at ``x``.

    The denominator is max(|analytic|, |numeric|, 1e-8). ``sample`` limits the
    check to that many randomly chosen coordinates. ``stencil=5`` and
    ``stencil=7`` switch to the fourth- and sixth-order central formulas, which
    tolerate a larger ``h`` and so resolve small gradient components above the
    rounding floor of the loss.
    """
    return max_param_error(lambda: f(x), [x], h=h, sample=sample, rng=rng, stencil=stencil)


def max_param_error(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
    stencil: int = 3,
) -> float:
    """Like :func:`finite_diff_check` but over several leaf tensors at once."""
    errs = param_errors(loss_fn, params, h=h, sample=sample, rng=rng, stencil=stencil)
    return max(errs) if errs else 0.0


def param_errors(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
    stencil: int = 3,
) -> list[float]:
    if h <= 0:
        raise UsageError("finite-difference step must be positive")
    if stencil not in (3, 5, 7):
        raise UsageError("stencil must be 3, 5 or 7")
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = True
        p.grad = None
    try:
        loss = loss_fn()
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise UsageError("finite_diff_check needs a scalar-valued function")
        loss.backward()
        analytic = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]
        rng = rng or np.random.default_rng(0)
        errors = []
        with no_grad():
            for p, an in zip(params, analytic):
                if not p.data.flags.c_contiguous:
                    p.data = np.ascontiguousarray(p.data)
                flat = p.data.reshape(-1)
                if sample is None or sample >= flat.size:
                    coords = np.arange(flat.size)
                else:
                    coords = rng.choice(flat.size, size=sample, replace=False)
                worst = 0.0
                for i in coords:
                    orig = flat[i]

                    def at(step):
                        flat[i] = orig + step
                        return float(loss_fn().data)

                    if stencil == 3:
                        num = (at(h) - at(-h)) / (2.0 * h)
                    elif stencil == 5:
                        num = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h)
                    else:
                        d1, d2, d3 = at(h) - at(-h), at(2 * h) - at(-2 * h), at(3 * h) - at(-3 * h)
                        num = (45.0 * d1 - 9.0 * d2 + d3) / (60.0 * h)
                    flat[i] = orig
                    a = float(an.reshape(-1)[i])
                    err = abs(a - num) / max(abs(a), abs(num), 1e-8)
                    worst = max(worst, err)
                errors.append(worst)
        return errors
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad = flag
            p.grad = None
