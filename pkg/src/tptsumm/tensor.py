"""Dense tensors with reverse-mode automatic differentiation.

Storage and arithmetic are numpy arrays; every differentiable primitive records
a closure that maps the output gradient to gradients for its inputs.  The
engine is deliberately small: only the operations the encoder/decoder stacks,
the losses and the probes need are provided.

Every primitive checks its output for NaN/Inf and raises
:class:`NonFiniteError` instead of letting a bad value propagate.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, NamedTuple, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "GraphError",
    "no_grad",
    "is_grad_enabled",
    "default_dtype",
    "get_default_dtype",
    "set_default_dtype",
    "matmul",
    "softmax_lastdim",
    "log_softmax_lastdim",
    "layer_norm",
    "relu",
    "add",
    "hadamard",
    "concat_lastdim",
    "embedding_lookup",
    "dropout",
    "cross_entropy",
    "backward",
    "grad_check",
]


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (non-scalar loss, repeated backward, ...)."""


_GRAD_ENABLED = True
_DEFAULT_DTYPE = np.dtype(np.float32)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


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


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the precision used for newly created tensors."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def _check_finite(data: np.ndarray, op: str) -> None:
    # a single reduction: NaN/Inf anywhere makes the sum non-finite
    if not np.isfinite(data.sum()):
        if np.isfinite(data).all():
            return  # overflow of the sum itself, entries are fine
        raise NonFiniteError(f"non-finite value produced by {op}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """An n-dimensional float array that can take part in an autodiff graph.

    Leaves created by the user accumulate ``∂loss/∂leaf`` into :attr:`grad` on
    :func:`backward`.  Non-leaf tensors hold a reference to their parents and
    a backward closure until the graph is consumed.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_consumed")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Tensor] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"
        self._consumed = False

    # --- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._op == "leaf"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        extra = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{extra})"

    def __len__(self) -> int:
        return len(self.data)

    # --- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return hadamard(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or _DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    out._consumed = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# --- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw, "sub")


def hadamard(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "hadamard")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), bw, "div")


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        return (g * c,)

    return _make(a.data * a.data.dtype.type(c), (a,), bw, "scale")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bw(g):
        return (g * 0.5 / out,)

    return _make(out, (a,), bw, "sqrt")


_relu_signs: Optional[list] = None


@contextlib.contextmanager
def record_relu_signs():
    """Collect the sign mask of every relu input evaluated inside the block."""
    global _relu_signs
    prev, _relu_signs = _relu_signs, []
    try:
        yield _relu_signs
    finally:
        _relu_signs = prev


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    if _relu_signs is not None:
        _relu_signs.append(mask)

    def bw(g):
        return (g * mask,)

    return _make(a.data * mask, (a,), bw, "relu")


# --- shape ops --------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape

    def bw(g):
        return (g.reshape(orig),)

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _make(a.data.transpose(axes), (a,), bw, "transpose")


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.ascontiguousarray(a.data[index]), (a,), bw, "getitem")


def concat_lastdim(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis (multi-head concatenation)."""
    parts = [_as_tensor(p) for p in parts]
    sizes = np.cumsum([p.shape[-1] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=-1))

    return _make(np.concatenate([p.data for p in parts], axis=-1), parts, bw, "concat")


# --- reductions -------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# --- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad
    if bd.ndim == 2 and ad.ndim > 2:
        # activations @ weight: one 2-D GEMM instead of a batched loop
        k, n = bd.shape
        a2 = ad.reshape(-1, k)
        out = (a2 @ bd).reshape(*ad.shape[:-1], n)

        def bw(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(ad.shape) if need_a else None
            gb = a2.T @ g2 if need_b else None
            return ga, gb

        return _make(out, (a, b), bw, "matmul")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if need_a else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if need_b else None
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


# --- normalisation / probabilities -----------------------------------------

def softmax_lastdim(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Max-stabilised softmax over the last axis.

    ``mask`` (broadcastable boolean, True = keep) sends excluded scores to
    -inf before normalisation; a row with no kept entry is an error.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax row fully masked")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def log_softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-position normalisation over the last axis followed by an affine map."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out.astype(xd.dtype, copy=False), (x, gain, bias), bw, "layer_norm")


# --- indexing / stochastic --------------------------------------------------

def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` for an integer array of ids."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"token id out of range [0, {n})")
    shape, dtype = table.shape, table.dtype

    def bw(g):
        flat, g2 = ids.reshape(-1), g.reshape(-1, shape[-1])
        if shape[0] * flat.size <= 1 << 22:
            onehot = np.zeros((flat.size, shape[0]), dtype=dtype)
            onehot[np.arange(flat.size), flat] = 1.0
            return (onehot.T @ g2,)
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, flat, g2)
        return (out,)

    return _make(table.data[ids], (table,), bw, "embedding")


def dropout(x: Tensor, p: float, rng=None, training: bool = True) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p); identity in eval mode."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if rng is None:
        raise ValueError("dropout in training mode needs an Rng")
    keep = rng.bernoulli(1.0 - p, x.shape)
    m = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))

    def bw(g):
        return (g * m,)

    return _make(x.data * m, (x,), bw, "dropout")


# --- losses -----------------------------------------------------------------

def cross_entropy(logits: Tensor, targets, ignore_index: Optional[int] = 0,
                  label_smoothing: float = 0.0) -> Tensor:
    """Mean token cross-entropy of ``softmax(logits)`` against integer targets.

    Tokens equal to ``ignore_index`` are excluded from both sum and count.
    With smoothing ε the target distribution is ``(1-ε)·onehot + ε/V``.
    """
    targets = np.asarray(targets)
    V = logits.shape[-1]
    z = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    if t.shape[0] != z.shape[0]:
        raise ValueError("targets do not match logits")
    keep = np.ones_like(t, dtype=bool) if ignore_index is None else t != ignore_index
    n = int(keep.sum())
    if n == 0:
        raise ValueError("no non-padding target tokens")
    if t.min() < 0 or t.max() >= V:
        raise IndexError("target id out of vocabulary range")
    zs = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=-1, keepdims=True))
    logp = zs - lse
    nll = -logp[np.arange(len(t)), t]
    eps = float(label_smoothing)
    per_tok = (1.0 - eps) * nll + eps * (-logp.mean(axis=-1))
    loss = np.asarray((per_tok * keep).sum() / n, dtype=z.dtype)
    shape = logits.shape

    def bw(g):
        q = np.full_like(z, eps / V)
        q[np.arange(len(t)), t] += 1.0 - eps
        dz = (np.exp(logp) - q) * (keep[:, None] / n)
        return ((dz * g).reshape(shape),)

    return _make(loss, (logits,), bw, "cross_entropy")


# --- backward ---------------------------------------------------------------

def _topo(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every ``requires_grad`` leaf reachable from ``loss``.

    The graph is released afterwards; a second call on the same loss raises.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward called twice on the same graph; re-run forward first")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring grad")
    order = _topo(loss)
    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                if node.grad is None:
                    node.grad = Tensor(g.astype(node.dtype, copy=False), dtype=node.dtype)
                else:
                    node.grad.data = node.grad.data + g
            continue
        if node._backward is None:
            raise GraphError("graph already consumed by a previous backward")
        if g is not None:
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                _check_finite(pg, f"backward of {node._op}")
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        node._backward = None
        node._parents = ()
        node._consumed = True


class GradCheckResult(NamedTuple):
    max_error: float
    checked: int
    skipped: int


def _same_signs(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check_result(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4,
                      indices: Optional[Iterable] = None, skip_kinks: bool = False) -> GradCheckResult:
    """Analytic versus central-difference gradient of scalar ``f`` at ``x``.

    The relative error of a coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    ``indices`` restricts the check to flat positions.  With ``skip_kinks`` a
    coordinate whose +h or -h evaluation flips the sign of any relu input is
    not differentiable on the stencil and is counted as skipped instead.
    """
    if x.dtype != np.float64:
        raise TypeError("grad_check requires a float64 tensor")
    saved_grad, saved_flag = x.grad, x.requires_grad
    x.grad = None
    x.requires_grad = True
    try:
        with record_relu_signs() as base:
            out = f(x)
        base = list(base)
        backward(out)
        analytic = np.zeros(x.size) if x.grad is None else x.grad.data.reshape(-1).copy()
        flat = x.data.reshape(-1)
        idx = range(flat.size) if indices is None else indices
        worst, checked, skipped = 0.0, 0, 0
        with no_grad():
            for i in idx:
                orig = flat[i]
                with record_relu_signs() as sp:
                    flat[i] = orig + h
                    fp = float(f(x).data)
                with record_relu_signs() as sm:
                    flat[i] = orig - h
                    fm = float(f(x).data)
                flat[i] = orig
                if skip_kinks and not (_same_signs(base, sp) and _same_signs(base, sm)):
                    skipped += 1
                    continue
                num = (fp - fm) / (2.0 * h)
                a = analytic[i]
                worst = max(worst, abs(a - num) / max(1e-8, abs(a) + abs(num)))
                checked += 1
        return GradCheckResult(worst, checked, skipped)
    finally:
        x.grad = saved_grad
        x.requires_grad = saved_flag


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4,
               indices: Optional[Iterable] = None) -> float:
    """Largest relative error ``|a - n| / max(1e-8, |a| + |n|)`` over the checked coordinates."""
    return grad_check_result(f, x, h, indices).max_error
