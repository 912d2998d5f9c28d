"""Reverse-mode automatic differentiation over dense numpy arrays.

The op set is deliberately closed and small: exactly what the segmentation
model needs (matmul, conv2d, norms, softmax, elementwise math, shape
surgery, gathers, reductions).  Forward kernels are vectorized numpy;
each op that participates in training records a backward closure, and
``backward()`` walks the tape in reverse topological order.

Compute defaults to float32.  Gradient verification runs in float64
(see :func:`precision`), where central finite differences are reliable.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "zeros",
    "ones",
    "full",
    "randn",
    "no_grad",
    "is_grad_enabled",
    "precision",
    "default_dtype",
    "set_default_dtype",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "relu",
    "gelu",
    "exp",
    "log",
    "sqrt",
    "power",
    "reshape",
    "transpose",
    "concat",
    "take",
    "gather_last",
    "index_select",
    "tsum",
    "tmean",
    "softmax",
    "log_softmax",
    "normalize",
    "layer_norm",
    "group_norm",
    "conv2d",
    "numerical_gradient",
    "gradient_check",
]


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class UsageError(RuntimeError):
    """Raised when an op is driven outside its contract."""


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def default_dtype() -> np.dtype:
    return np.dtype(_DEFAULT_DTYPE)


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise UsageError(f"unsupported default dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (e.g. float64 for grad checks)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense N-dimensional array with optional gradient tracking.

    ``data`` is always a contiguous numpy array.  ``grad`` is lazily
    allocated with the same shape and accumulates across repeated
    backward passes (losses summed over frames rely on this).
    Tensors are treated as immutable once created except for ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- introspection -------------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autograd ------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every tracked leaf's ``grad``.

        ``self`` must be scalar (size 1); repeated calls accumulate.
        """
        if self.size != 1:
            raise UsageError(f"backward() requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward is None:
                # leaf: accumulate
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g
            if node._backward is not None:
                node._backward_dispatch(g, grads)

    def _backward_dispatch(self, g: np.ndarray, grads: dict[int, np.ndarray]) -> None:
        parent_grads = self._backward(g)
        for p, pg in zip(self._parents, parent_grads):
            if pg is None or not _needs_grad(p):
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg

    # -- operator sugar ------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return index_select(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _raise_nonscalar(t: Tensor):
    raise UsageError(f"item() on non-scalar tensor of shape {t.shape}")


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
        out.requires_grad = True
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- factories ----------------------------------------------------------


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.asarray(data, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def full(shape, value, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(shape, value, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def randn(rng: np.random.Generator, shape, std: float = 1.0, requires_grad: bool = False) -> Tensor:
    return Tensor((rng.standard_normal(shape) * std).astype(_DEFAULT_DTYPE), requires_grad=requires_grad)


# -- elementwise --------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), bwd)


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    out = a.data**p

    def bwd(g):
        return (g * p * a.data ** (p - 1),)

    return _make(out, (a,), bwd)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _make(out, (a,), bwd)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _make(out, (a,), bwd)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)

    def bwd(g):
        return (g * 0.5 / out,)

    return _make(out, (a,), bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0)

    def bwd(g):
        return (g * (a.data > 0),)

    return _make(out, (a,), bwd)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a) -> Tensor:
    """tanh-approximation GELU; smooth and cheap on CPU."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        dt = (1.0 - t * t) * dinner
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _make(out, (a,), bwd)


# -- linear algebra ------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product ``a[..,n,k] @ b[..,k,m]``.

    Batch extents follow numpy broadcasting; inner extents must agree.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bwd)


# -- shape surgery -------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), bwd)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    out = np.transpose(a.data, axes)

    def bwd(g):
        inv = None if axes is None else np.argsort(axes)
        return (np.transpose(g, inv),)

    return _make(out, (a,), bwd)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, ts, bwd)


def index_select(a, idx) -> Tensor:
    """Numpy-style indexing (slices, int/bool arrays); scatter-add backward."""
    a = _as_tensor(a)
    out = a.data[idx]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(np.ascontiguousarray(out), (a,), bwd)


def index_select_unique(a, idx) -> Tensor:
    """index_select for indices that address pairwise-distinct positions;
    the backward pass writes directly instead of scatter-adding."""
    a = _as_tensor(a)
    out = a.data[idx]

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return (ga,)

    return _make(np.ascontiguousarray(out), (a,), bwd)


def take(a, idx) -> Tensor:
    """Gather rows along axis 0 by an integer index array of any shape."""
    a = _as_tensor(a)
    idx = np.asarray(idx)
    out = a.data[idx]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx.reshape(-1), g.reshape((-1,) + a.shape[1:]))
        return (ga,)

    return _make(out, (a,), bwd)


def gather_last(a, idx) -> Tensor:
    """``out[..., j] = a[..., idx[..., j]]`` with matching leading dims."""
    a = _as_tensor(a)
    idx = np.asarray(idx)
    if idx.shape[:-1] != a.shape[:-1]:
        raise ShapeError(f"gather_last leading dims disagree: {a.shape} vs {idx.shape}")
    out = np.take_along_axis(a.data, idx, axis=-1)

    def bwd(g):
        ga = np.zeros_like(a.data)
        flat_g = g.reshape(-1, idx.shape[-1])
        flat_i = idx.reshape(-1, idx.shape[-1])
        rows = np.arange(flat_i.shape[0])[:, None]
        ga2 = ga.reshape(-1, a.shape[-1])
        np.add.at(ga2, (rows, flat_i), flat_g)
        return (ga2.reshape(a.shape),)

    return _make(out, (a,), bwd)


# -- reductions ----------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return _make(out, (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- fused nonlinear kernels ----------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    """Max-shifted softmax; rows sum to one along ``axis``."""
    a = _as_tensor(a)
    if np.isnan(a.data).any():
        raise UsageError("softmax received NaN input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), bwd)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bwd)


def normalize(a, axes, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance over ``axes`` (the shared norm kernel)."""
    a = _as_tensor(a)
    axes = axes if isinstance(axes, tuple) else (axes,)
    mean = a.data.mean(axis=axes, keepdims=True)
    centered = a.data - mean
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = centered * inv
    n = int(np.prod([a.shape[ax] for ax in axes]))

    def bwd(g):
        gsum = g.sum(axis=axes, keepdims=True)
        gy = (g * out).sum(axis=axes, keepdims=True)
        return (inv / n * (n * g - gsum - out * gy),)

    return _make(out, (a,), bwd)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel (last) axis, then per-channel affine."""
    y = normalize(x, axes=-1, eps=eps)
    return add(mul(y, gain), bias)


def group_norm(x, groups: int, gain, bias, eps: float = 1e-5) -> Tensor:
    """Group normalization for ``x[C,H,W]``; affine applied per channel."""
    x = _as_tensor(x)
    c, h, w = x.shape
    if c % groups != 0:
        raise ShapeError(f"channels {c} not divisible by groups {groups}")
    grouped = reshape(x, (groups, c // groups, h, w))
    y = normalize(grouped, axes=(1, 2, 3), eps=eps)
    y = reshape(y, (c, h, w))
    gain = _as_tensor(gain)
    bias = _as_tensor(bias)
    return add(mul(y, reshape(gain, (c, 1, 1))), reshape(bias, (c, 1, 1)))


# -- convolution -----------------------------------------------------------


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[Cin,H,W]`` with ``weight[Cout,Cin,kh,kw]``.

    Output extent per axis is ``floor((n + 2*padding - k)/stride) + 1``;
    degenerate extents are rejected.  Implemented by im2col + one GEMM.
    """
    x = _as_tensor(x)
    weight = _as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects x[C,H,W], w[O,C,kh,kw]; got {x.shape}, {weight.shape}")
    cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {cin} vs weight {cin_w}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d degenerate output {oh}x{ow} for input {h}x{w}, kernel {kh}x{kw}")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)  # [cin*kh*kw, oh*ow]
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = (wmat @ cols).reshape(cout, oh, ow)
    if bias is not None:
        bias = _as_tensor(bias)
        out = out + bias.data.reshape(cout, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        gmat = g.reshape(cout, oh * ow)
        gw = (gmat @ cols.T).reshape(weight.shape)
        gcols = wmat.T @ gmat
        gxp = _col2im(gcols, xp.shape, kh, kw, stride, oh, ow)
        gx = gxp[:, padding : padding + h, padding : padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2))

    return _make(out, parents, bwd)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    cin = xp.shape[0]
    cols = np.empty((cin, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(cin * kh * kw, oh * ow)


def _col2im(gcols: np.ndarray, xp_shape, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    cin = xp_shape[0]
    g = gcols.reshape(cin, kh, kw, oh, ow)
    gxp = np.zeros(xp_shape, dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride] += g[:, i, j]
    return gxp


# -- gradient verification ---------------------------------------------------


def numerical_gradient(f: Callable[[], Tensor], leaf: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``leaf.data``."""
    grad = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f().data.reshape(-1)[0])
        flat[i] = orig - eps
        lo = float(f().data.reshape(-1)[0])
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def gradient_check(f: Callable[[], Tensor], leaves: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between analytic and finite-difference gradients.

    Relative error is measured in the max norm per leaf:
    ``|analytic - numeric|_inf / max(|numeric|_inf, 1e-8)``.
    """
    for leaf in leaves:
        leaf.zero_grad()
    out = f()
    out.backward()
    worst = 0.0
    for leaf in leaves:
        num = numerical_gradient(f, leaf, eps=eps)
        ana = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        scale = max(np.abs(num).max(), 1e-8)
        worst = max(worst, float(np.abs(ana - num).max() / scale))
    return worst
