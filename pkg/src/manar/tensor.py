"""Dense tensors with a small reverse-mode differentiation engine.

Every ``Tensor`` wraps a numpy array.  Operations on tensors that require
gradients record a ``Node`` carrying the inputs and a backward rule.  Nodes
receive a monotonically increasing sequence number when created, so the
order of creation is a valid topological order of the recorded graph;
``backward`` replays the nodes reachable from the root in reverse sequence
order, visiting each exactly once.

Storage defaults to float32.  ``float64_mode()`` switches the default for
gradient checking and convex-hull analysis.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "zeros",
    "no_grad",
    "is_grad_enabled",
    "float64_mode",
    "default_dtype",
    "matmul",
    "add",
    "mul",
    "scale",
    "transpose",
    "concat",
    "concat_rows",
    "gather",
    "gather_rows",
    "sliding_window",
    "band_dot",
    "band_mix",
    "softmax",
    "softmax_row",
    "log_softmax",
    "cross_entropy",
    "gelu",
    "layer_norm",
    "topk",
    "topk_indices",
    "backward",
    "finite_diff_grad",
]

_state = threading.local()
_seq = itertools.count()


def _get(name, default):
    return getattr(_state, name, default)


def default_dtype() -> np.dtype:
    return _get("dtype", np.dtype(np.float32))


def is_grad_enabled() -> bool:
    return _get("grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording within the block."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def float64_mode():
    """Create new tensors in 64-bit precision within the block."""
    prev = default_dtype()
    _state.dtype = np.dtype(np.float64)
    try:
        yield
    finally:
        _state.dtype = prev


class Node:
    __slots__ = ("seq", "inputs", "output", "rule", "grad", "consumed")

    def __init__(self, inputs, rule):
        self.seq = next(_seq)
        self.inputs = inputs
        self.rule = rule
        self.output = None
        self.grad = None
        self.consumed = False


class Tensor:
    """Dense array with an optional gradient slot and a link into the tape."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(default_dtype())
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self.name = name

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        return mul(self, reciprocal(_as_tensor(other, self.dtype)))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or default_dtype()), requires_grad=requires_grad)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    out.requires_grad = False
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        node = Node(tuple(inputs), rule)
        node.output = out
        out._node = node
        out.requires_grad = True
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU; smooth everywhere, which keeps gradchecks clean."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def rule(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), rule)


# -- shape ---------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    """Swap the last two axes, or permute by ``axes`` when given."""
    if axes is None:
        if a.ndim < 2:
            raise ValueError(f"transpose needs at least 2 dims, got shape {a.shape}")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def index(a: Tensor, key) -> Tensor:
    src_shape, dt = a.shape, a.dtype
    parts = key if isinstance(key, tuple) else (key,)
    fancy = any(isinstance(k, (np.ndarray, list)) for k in parts)

    def rule(g):
        full = np.zeros(src_shape, dtype=dt)
        if fancy:
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return _make(a.data[key], (a,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, rule)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    return concat([a, b], axis=0)


def gather(a: Tensor, idx: np.ndarray, axis: int = 0) -> Tensor:
    """Take slices of ``a`` along ``axis`` at integer positions ``idx``.

    Indices are constants; the gradient scatters back with accumulation.
    """
    idx = np.asarray(idx, dtype=np.intp)
    axis = axis % a.ndim
    key = (slice(None),) * axis + (idx,)
    src_shape, dt = a.shape, a.dtype

    def rule(g):
        full = np.zeros(src_shape, dtype=dt)
        np.add.at(full, key, g)
        return (full,)

    return _make(a.data[key], (a,), rule)


def gather_rows(table: Tensor, idx) -> Tensor:
    return gather(table, idx, axis=0)


def sliding_window(x: Tensor, before: int, after: int) -> Tensor:
    """Windows over axis -2: ``out[..., i, w, :] = x[..., i + w - before, :]``.

    Positions outside ``[0, n)`` read as zero.  The result has shape
    ``(..., n, before + after + 1, d)`` and is built as a strided view.
    """
    if x.ndim < 2:
        raise ValueError(f"sliding_window needs at least 2 dims, got shape {x.shape}")
    n, d = x.shape[-2], x.shape[-1]
    width = before + after + 1
    padded = np.zeros(x.shape[:-2] + (n + width - 1, d), dtype=x.dtype)
    padded[..., before:before + n, :] = x.data
    view = np.lib.stride_tricks.sliding_window_view(padded, width, axis=-2)
    out = np.swapaxes(view, -1, -2)

    def rule(g):
        gpad = np.zeros(padded.shape, dtype=x.dtype)
        for w in range(width):
            gpad[..., w:w + n, :] += g[..., :, w, :]
        return (gpad[..., before:before + n, :],)

    return _make(out, (x,), rule)


def _padded_windows(x: np.ndarray, before: int, after: int):
    n = x.shape[-2]
    width = before + after + 1
    padded = np.zeros(x.shape[:-2] + (n + width - 1, x.shape[-1]), dtype=x.dtype)
    padded[..., before:before + n, :] = x
    view = np.swapaxes(np.lib.stride_tricks.sliding_window_view(padded, width, axis=-2), -1, -2)
    return padded, view


def band_dot(q: Tensor, k: Tensor, before: int, after: int) -> Tensor:
    """``out[..., i, w] = q[..., i, :] . k[..., i + w - before, :]`` (zero outside ``[0, n)``).

    Same values as ``(q[..., None, :] @ sliding_window(k)^T)`` without
    materialising the windows.
    """
    k = _as_tensor(k, q.dtype)
    if q.shape != k.shape:
        raise ValueError(f"band_dot shape mismatch: {q.shape} vs {k.shape}")
    n = q.shape[-2]
    width = before + after + 1
    qd = q.data
    padded, view = _padded_windows(k.data, before, after)
    out = np.einsum("...id,...iwd->...iw", qd, view)

    def rule(g):
        gq = np.einsum("...iw,...iwd->...id", g, view) if q.requires_grad else None
        gk = None
        if k.requires_grad:
            gpad = np.zeros(padded.shape, dtype=qd.dtype)
            for w in range(width):
                gpad[..., w:w + n, :] += g[..., w, None] * qd
            gk = gpad[..., before:before + n, :]
        return gq, gk

    return _make(out, (q, k), rule)


def band_mix(p: Tensor, v: Tensor, before: int, after: int) -> Tensor:
    """``out[..., i, :] = sum_w p[..., i, w] * v[..., i + w - before, :]`` (zero outside ``[0, n)``)."""
    v = _as_tensor(v, p.dtype)
    n = v.shape[-2]
    width = before + after + 1
    if p.shape != v.shape[:-1] + (width,):
        raise ValueError(f"band_mix shape mismatch: weights {p.shape}, values {v.shape}, width {width}")
    pd = p.data
    padded, view = _padded_windows(v.data, before, after)
    out = np.einsum("...iw,...iwd->...id", pd, view)

    def rule(g):
        gp = np.einsum("...id,...iwd->...iw", g, view) if p.requires_grad else None
        gv = None
        if v.requires_grad:
            gpad = np.zeros(padded.shape, dtype=pd.dtype)
            for w in range(width):
                gpad[..., w:w + n, :] += pd[..., w, None] * g
            gv = gpad[..., before:before + n, :]
        return gp, gv

    return _make(out, (p, v), rule)


# -- reductions ----------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), rule)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tsum(a, axis, keepdims), 1.0 / count)


# -- linear algebra ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), rule)


# -- softmax family ------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), rule)


def softmax_row(logits: Tensor) -> Tensor:
    """Row-wise softmax of a matrix (max-subtracted)."""
    return softmax(_as_tensor(logits), axis=-1)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def rule(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), rule)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-wise logits."""
    labels = np.asarray(labels, dtype=np.intp)
    lp = log_softmax(logits, axis=-1)
    picked = index(lp, (np.arange(len(labels)), labels))
    return scale(tsum(picked), -1.0 / len(labels))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = mean(mul(xc, xc), axis=-1, keepdims=True)
    inv = reciprocal(sqrt(add(var, np.asarray(eps, dtype=x.dtype))))
    return add(mul(mul(xc, inv), gain), bias)


# -- selection -----------------------------------------------------------


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries along the last axis.

    Ordered by descending score; equal scores keep the smaller index first.
    """
    scores = np.asarray(scores)
    p = scores.shape[-1]
    if k > p or k < 0:
        raise ValueError(f"topk: k={k} exceeds the {p} available scores")
    # stable sort on the negation keeps equal scores in index order
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def topk(scores, k: int) -> tuple[list[int], list[float]]:
    """Top-``k`` of a 1-D score vector as ``(indices, values)``."""
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores).reshape(-1)
    idx = topk_indices(s, k)
    return [int(i) for i in idx], [float(s[i]) for i in idx]


# -- differentiation -----------------------------------------------------


def _collect(root_node: Node) -> list[Node]:
    seen = {id(root_node)}
    stack = [root_node]
    nodes = []
    while stack:
        node = stack.pop()
        nodes.append(node)
        for t in node.inputs:
            child = t._node
            if child is not None and id(child) not in seen:
                seen.add(id(child))
                stack.append(child)
    nodes.sort(key=lambda n: n.seq, reverse=True)
    return nodes


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype)
    else:
        t.grad = t.grad + g


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from the scalar ``root``.

    The recorded graph is released afterwards; calling again on the same
    root raises ``RuntimeError``.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    seed = np.ones(root.shape, dtype=root.dtype)
    node = root._node
    if node is None:
        if not root.requires_grad:
            raise RuntimeError("root does not require grad")
        _accumulate_leaf(root, seed)
        return
    if node.consumed:
        raise RuntimeError("graph already differentiated; run a fresh forward pass first")
    node.grad = seed
    for n in _collect(node):
        g = n.grad
        n.consumed = True
        if g is not None:
            grads = n.rule(g)
            for t, gi in zip(n.inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                child = t._node
                if child is None:
                    _accumulate_leaf(t, gi)
                elif child.grad is None:
                    child.grad = gi
                else:
                    child.grad = child.grad + gi
        n.grad = None
        n.rule = None
        n.inputs = ()


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, step: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    base = x.data
    work = base.astype(np.float64, copy=True) if base.dtype != np.float64 else base.copy()
    grad = np.zeros_like(work)
    flat = work.reshape(-1)
    probe = Tensor(work, dtype=work.dtype)

    def evaluate() -> float:
        with no_grad():
            val = f(probe)
        return float(np.asarray(val.data if isinstance(val, Tensor) else val).reshape(-1)[0])

    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = evaluate()
        flat[i] = orig - step
        down = evaluate()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return Tensor(grad, dtype=grad.dtype)


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)
