"""Dense tensors with reverse-mode differentiation.

Only the operations the rest of the package needs are provided. Shapes are
explicit: binary elementwise ops accept equal shapes, or a 0-d tensor (or a
Python number) against any shape. There is no general broadcasting.

Every tensor holds a read-only ``float64`` array. Operation results record
their parents and a vector-Jacobian product when any input requires a
gradient; :func:`backward` walks that record once in reverse topological
order.
"""
from __future__ import annotations

import builtins
import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError, NumericalError, ShapeError

DTYPE = np.float64
PADDING_MODES = ("circular", "reflect")

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


def needs_grad(*tensors) -> bool:
    """Whether an op over ``tensors`` would be recorded for backprop."""
    return _grad_enabled() and any(isinstance(t, Tensor) and t.requires_grad for t in tensors)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Immutable array node of the computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)  # always a private copy
        if arr.size == 0:
            raise ShapeError(f"empty tensor of shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._vjp = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, parents: tuple, vjp) -> "Tensor":
        # internal constructor: takes ownership of ``arr`` without copying
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=DTYPE)
        arr.flags.writeable = False
        out.data = arr
        out.grad = None
        if _grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, (), None)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self):
        backward(self)

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    if isinstance(data, Tensor):
        return data
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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


def _backprop(root: Tensor, seed=None) -> tuple[dict, int]:
    if not root.requires_grad:
        return {}, 0
    if seed is None:
        if root.size != 1:
            raise ShapeError("backward() without a seed needs a scalar output")
        seed = np.ones(root.shape, dtype=DTYPE)
    grads = {id(root): np.asarray(seed, dtype=DTYPE)}
    leaves = {}
    visited = 0
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        visited += 1
        if g is None:
            continue
        if not node._parents:
            leaves[id(node)] = (node, g)
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves, visited


def backward(root: Tensor, seed=None) -> int:
    """Accumulate d(root)/d(leaf) into ``leaf.grad``; returns nodes visited."""
    leaves, visited = _backprop(root, seed)
    for node, g in leaves.values():
        node.grad = g.copy() if node.grad is None else node.grad + g
    return visited


def grad(root: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``root`` w.r.t. leaf ``inputs`` (zeros if unused)."""
    leaves, _ = _backprop(root)
    out = []
    for x in inputs:
        hit = leaves.get(id(x))
        out.append(hit[1].copy() if hit is not None else np.zeros(x.shape, dtype=DTYPE))
    return out


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _binary_shapes(a: Tensor, b: Tensor, opname: str):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} differ")


def _unbroadcast(g, shape):
    return np.asarray(g.sum()) if shape == () and g.shape != () else g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._wrap(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._wrap(a.data - b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._wrap(ad * bd, (a, b),
                        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._wrap(out, (a, b),
                        lambda g: (_unbroadcast(g / bd, ad.shape),
                                   _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor._wrap(-a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0  # subgradient at 0 is 0
    return Tensor._wrap(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return Tensor._wrap(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._wrap(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    return Tensor._wrap(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    return Tensor._wrap(np.log(x), (a,), lambda g: (g / x,))


def smooth_l1(a, beta: float = 1.0) -> Tensor:
    """Huber-style penalty: 0.5 x²/beta inside |x| < beta, |x| - beta/2 outside."""
    a = _as_tensor(a)
    x = a.data
    inside = np.abs(x) < beta
    y = np.where(inside, 0.5 * x * x / beta, np.abs(x) - 0.5 * beta)
    return Tensor._wrap(y, (a,), lambda g: (g * np.where(inside, x / beta, np.sign(x)),))


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "relu": relu, "tanh": tanh, "sigmoid": sigmoid, "exp": exp, "log": log,
}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise DomainError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    old = a.shape
    return Tensor._wrap(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose needs rank 2, got {a.shape}")
    return Tensor._wrap(a.data.T, (a,), lambda g: (g.T,))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of nothing")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    cuts = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return Tensor._wrap(out, tuple(parts), lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("stack of nothing")
    if len({p.shape for p in parts}) != 1:
        raise ShapeError(f"stack: mixed shapes {[p.shape for p in parts]}")
    out = np.stack([p.data for p in parts], axis=axis)
    n = len(parts)
    return Tensor._wrap(out, tuple(parts),
                        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def crop(a, y0: int, y1: int, x0: int, x1: int) -> Tensor:
    """Spatial window ``a[y0:y1, x0:x1, :]`` of an h×w×c map."""
    a = _as_tensor(a)
    if a.ndim != 3:
        raise ShapeError(f"crop needs an h×w×c map, got {a.shape}")
    h, w, _ = a.shape
    if not (0 <= y0 < y1 <= h and 0 <= x0 < x1 <= w):
        raise ShapeError(f"crop window {(y0, y1, x0, x1)} outside {a.shape}")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[y0:y1, x0:x1, :] = g
        return (full,)

    return Tensor._wrap(a.data[y0:y1, x0:x1, :], (a,), vjp)


def pick(a, index) -> Tensor:
    """Row-wise gather ``a[i, index[i]]`` of an m×n matrix."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError(f"pick: matrix {a.shape} with index {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[1]):
        raise DomainError("pick: index out of range")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[rows, index] = g
        return (full,)

    return Tensor._wrap(a.data[rows, index], (a,), vjp)


def bias_add(a, b) -> Tensor:
    """Add a vector along the last axis of ``a`` (explicit, not broadcasting)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim != 1 or a.shape[-1:] != b.shape:
        raise ShapeError(f"bias_add: {a.shape} with bias {b.shape}")
    axes = tuple(range(a.ndim - 1))
    return Tensor._wrap(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=axes)))


# ---------------------------------------------------------------------------
# linear algebra and reductions
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product. A rank-1 left operand is treated as a single row."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if ad.ndim == 1:
        return Tensor._wrap(ad @ bd, (a, b), lambda g: (bd @ g, np.outer(ad, g)))
    return Tensor._wrap(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def sum(a, axis=None) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    shape = a.shape
    if axis is None:
        return Tensor._wrap(np.asarray(a.data.sum()), (a,),
                            lambda g: (np.full(shape, g, dtype=DTYPE),))
    ax = axis % a.ndim
    return Tensor._wrap(a.data.sum(axis=ax), (a,),
                        lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def mean(a) -> Tensor:
    a = _as_tensor(a)
    return mul(sum(a), 1.0 / a.size)


def mean_pool_spatial(a) -> Tensor:
    """h×w×c map to its per-channel spatial mean (length c)."""
    a = _as_tensor(a)
    if a.ndim != 3:
        raise ShapeError(f"mean_pool_spatial needs an h×w×c map, got {a.shape}")
    h, w, c = a.shape
    n = h * w
    return Tensor._wrap(a.data.mean(axis=(0, 1)), (a,),
                        lambda g: (np.broadcast_to(g / n, (h, w, c)).copy(),))


def l2_norm(a) -> Tensor:
    """Euclidean norm of all entries; the gradient at the origin is taken as 0."""
    a = _as_tensor(a)
    x = a.data
    n = float(np.sqrt(np.sum(x * x)))

    def vjp(g):
        if n == 0.0:
            return (np.zeros_like(x),)
        return (g * x / n,)

    return Tensor._wrap(np.asarray(n), (a,), vjp)


def max(a) -> Tensor:  # noqa: A001
    """Largest entry; the gradient goes to the first maximizer."""
    a = _as_tensor(a)
    flat = a.data.reshape(-1)
    k = int(np.argmax(flat))
    shape = a.shape

    def vjp(g):
        out = np.zeros(flat.shape, dtype=DTYPE)
        out[k] = g
        return (out.reshape(shape),)

    return Tensor._wrap(np.asarray(flat[k]), (a,), vjp)


_REDUCE = {"mean_pool_spatial": mean_pool_spatial, "l2_norm": l2_norm, "sum": sum}


def reduce(op: str, x) -> Tensor:
    try:
        fn = _REDUCE[op]
    except KeyError:
        raise DomainError(f"unknown reduction {op!r}") from None
    return fn(x)


def logsumexp(a, mask=None) -> Tensor:
    """Row-wise log Σ exp over an m×n matrix, restricted to ``mask`` if given."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"logsumexp needs rank 2, got {a.shape}")
    x = a.data
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"logsumexp mask {mask.shape} vs {x.shape}")
    if not mask.any(axis=1).all():
        raise DomainError("logsumexp: a row has no included entries")
    masked = np.where(mask, x, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(masked - m), 0.0)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s))[:, 0]
    soft = e / s
    return Tensor._wrap(out, (a,), lambda g: (g[:, None] * soft,))


def normalize_rows(a) -> Tensor:
    """Scale every row of an m×n matrix to unit Euclidean norm."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"normalize_rows needs rank 2, got {a.shape}")
    x = a.data
    n = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    if np.any(n == 0.0):
        raise NumericalError("normalize_rows: zero-norm row")
    y = x / n
    return Tensor._wrap(y, (a,),
                        lambda g: ((g - y * np.sum(g * y, axis=1, keepdims=True)) / n,))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def pad_index(n: int, r: int, mode: str) -> np.ndarray:
    """Source index of every position of a length-``n`` axis padded by ``r``."""
    idx = np.arange(-r, n + r)
    if mode == "circular":
        return idx % n
    if mode == "reflect":
        if n == 1:
            return np.zeros_like(idx)
        period = 2 * (n - 1)
        m = idx % period
        return np.where(m >= n, period - m, m)
    raise DomainError(f"unknown padding mode {mode!r}; expected one of {PADDING_MODES}")


def _unpad(gp: np.ndarray, ih: np.ndarray, iw: np.ndarray, h: int, w: int) -> np.ndarray:
    rows = np.zeros((h,) + gp.shape[1:], dtype=DTYPE)
    np.add.at(rows, ih, gp)
    out = np.zeros((h, w) + gp.shape[2:], dtype=DTYPE)
    np.add.at(out, (slice(None), iw), rows)
    return out


def conv2d(x, kernel, padding: str = "circular") -> Tensor:
    """'Same' cross-correlation of an h×w×c_in map with a k×k×c_in×c_out kernel.

    ``out[y, x, o] = Σ_{a, b, c} pad(x)[y + a, x + b, c] · kernel[a, b, c, o]``
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape}, kernel {kernel.shape}")
    k, k2, cin, cout = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {kernel.shape}")
    if cin != x.shape[2]:
        raise ShapeError(f"conv2d: kernel expects {cin} channels, input has {x.shape[2]}")
    h, w, _ = x.shape
    r = k // 2
    ih, iw = pad_index(h, r, padding), pad_index(w, r, padding)
    padded = x.data[ih][:, iw]
    win = sliding_window_view(padded, (k, k), axis=(0, 1))  # h, w, cin, k, k
    cols = win.transpose(0, 1, 3, 4, 2).reshape(h * w, k * k * cin)
    kmat = kernel.data.reshape(k * k * cin, cout)
    out = (cols @ kmat).reshape(h, w, cout)

    def vjp(g):
        g2 = g.reshape(h * w, cout)
        gk = (cols.T @ g2).reshape(k, k, cin, cout)
        gcols = (g2 @ kmat.T).reshape(h, w, k, k, cin)
        gp = np.zeros(padded.shape, dtype=DTYPE)
        for a in range(k):
            for b in range(k):
                gp[a:a + h, b:b + w, :] += gcols[:, :, a, b, :]
        return _unpad(gp, ih, iw, h, w), gk

    return Tensor._wrap(out, (x, kernel), vjp)


def filter_matrix(n: int, taps: np.ndarray, mode: str) -> np.ndarray:
    """n×n matrix applying the 1-D odd-length filter ``taps`` along one axis."""
    taps = np.asarray(taps, dtype=DTYPE)
    r = len(taps) // 2
    idx = pad_index(n, r, mode)
    mat = np.zeros((n, n), dtype=DTYPE)
    rows = np.repeat(np.arange(n), len(taps))
    cols = idx[np.arange(n)[:, None] + np.arange(len(taps))[None, :]].reshape(-1)
    np.add.at(mat, (rows, cols), np.tile(taps, n))
    return mat


def separable_filter(x, taps, padding: str = "circular") -> Tensor:
    """Depthwise 'same' filtering of an h×w×c map by ``outer(taps, taps)``.

    Equivalent to :func:`conv2d` with a diagonal channel kernel whose spatial
    taps are ``outer(taps, taps)``, evaluated as two 1-D passes.
    """
    x = _as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"separable_filter needs an h×w×c map, got {x.shape}")
    taps = np.asarray(taps, dtype=DTYPE)
    if taps.ndim != 1 or len(taps) % 2 == 0:
        raise ShapeError("separable_filter: taps must be a 1-D odd-length array")
    h, w, _ = x.shape
    ah, aw = filter_matrix(h, taps, padding), filter_matrix(w, taps, padding)
    out = np.einsum("ij,jwc->iwc", ah, x.data)
    out = np.einsum("kw,iwc->ikc", aw, out)

    def vjp(g):
        t = np.einsum("kw,ikc->iwc", aw, g)
        return (np.einsum("ij,iwc->jwc", ah, t),)

    return Tensor._wrap(out, (x,), vjp)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[list], Tensor], params: Iterable, eps: float = 1e-5) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``f`` maps a list of tensors to a scalar tensor. The error at each
    coordinate is ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    base = [np.array(p.data if isinstance(p, Tensor) else p, dtype=DTYPE) for p in params]
    leaves = [Tensor(b, requires_grad=True) for b in base]
    out = f(leaves)
    if out.size != 1:
        raise ShapeError("grad_check: f must return a scalar")
    if not np.isfinite(out.data).all():
        raise NumericalError("grad_check: f is not finite at the base point")
    analytic = grad(out, leaves)

    def evaluate(arrays):
        with no_grad():
            val = float(f([Tensor(a) for a in arrays]).data)
        if not math.isfinite(val):
            raise NumericalError("grad_check: f is not finite at a perturbed point")
        return val

    worst = 0.0
    for i, b in enumerate(base):
        flat = b.reshape(-1)
        ga = analytic[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = evaluate(base)
            flat[j] = orig - eps
            fm = evaluate(base)
            flat[j] = orig
            num = (fp - fm) / (2.0 * eps)
            err = abs(ga[j] - num) / builtins.max(1.0, abs(ga[j]), abs(num))
            worst = builtins.max(worst, err)
    return worst

