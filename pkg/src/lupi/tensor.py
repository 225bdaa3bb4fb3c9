"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that records its
parents and a closure mapping the output gradient to one gradient per parent.
:func:`backward` walks the recorded graph in reverse topological order.

Scalars are stored with shape ``(1,)`` so that every tensor has at least one
positive dimension.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "GradcheckError",
    "Tensor",
    "RngState",
    "as_tensor",
    "forward",
    "backward",
    "gradcheck",
    "gradcheck_params",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "linear",
    "relu",
    "softplus",
    "cap",
    "sqrt",
    "log",
    "exp",
    "absolute",
    "square",
    "tsum",
    "tmean",
    "log_softmax",
    "pick",
    "take_rows",
    "scatter_rows",
    "detach",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, left: tuple, right: tuple, detail: str = ""):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        msg = f"{op}: incompatible shapes {self.left} and {self.right}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GradcheckError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf", name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str, backward_fn) -> "Tensor":
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        if data.ndim == 0:
            data = data.reshape(1)
        out.data = data
        out.grad = None
        out.op = op
        out.name = None
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out.parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def relu(self):
        return relu(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return Tensor._result(a.data / b.data, (a, b), "div", bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), "neg", lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product of a 2-d tensor with a 2-d or 1-d tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape, "inner dimensions must agree")
    if b.data.ndim == 1:

        def bw(g):
            return np.outer(g, b.data), a.data.T @ g

    else:

        def bw(g):
            return g @ b.data.T, a.data.T @ g

    return Tensor._result(a.data @ b.data, (a, b), "matmul", bw)


def linear(x, W, b=None) -> Tensor:
    """``x @ W.T + b`` for a batch ``x`` of shape (batch, in), or ``W @ x + b`` for a vector."""
    x, W = as_tensor(x), as_tensor(W)
    if W.data.ndim != 2 or x.data.ndim not in (1, 2) or x.shape[-1] != W.shape[1]:
        raise ShapeError("linear", x.shape, W.shape, "input width must equal weight in-dim")
    out = x.data @ W.data.T
    parents = [x, W]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[0],):
            raise ShapeError("linear", W.shape, b.shape, "bias length must equal weight out-dim")
        out = out + b.data
        parents.append(b)

    def bw(g):
        g2 = g.reshape(-1, W.shape[0])
        x2 = x.data.reshape(-1, W.shape[1])
        grads = [(g2 @ W.data).reshape(x.shape), g2.T @ x2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return Tensor._result(out, parents, "linear", bw)


# ---------------------------------------------------------------------------
# elementwise unary ops


def relu(a) -> Tensor:
    # subgradient at 0 is 0
    a = as_tensor(a)
    on = a.data > 0
    return Tensor._result(np.where(on, a.data, 0.0), (a,), "relu", lambda g: (g * on,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(np.logaddexp(0.0, a.data), (a,), "softplus", lambda g: (g * _sigmoid(a.data),))


def cap(a, ceiling: float) -> Tensor:
    """Elementwise ``min(a, ceiling)``; gradient is zero where the cap binds."""
    a = as_tensor(a)
    keep = ~(a.data > ceiling)  # NaN stays NaN
    return Tensor._result(np.where(keep, a.data, ceiling), (a,), "cap", lambda g: (g * keep,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d,)

    return Tensor._result(out, (a,), "sqrt", bw)


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), "exp", lambda g: (g * out,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(np.abs(a.data), (a,), "abs", lambda g: (g * np.sign(a.data),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(a.data * a.data, (a,), "square", lambda g: (2.0 * g * a.data,))


# ---------------------------------------------------------------------------
# reductions and indexing


def tsum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    if axis is None:

        def bw(g):
            return (np.full(a.shape, g.reshape(-1)[0]),)

        return Tensor._result(np.sum(a.data), (a,), "sum", bw)

    axis = axis % a.data.ndim
    reduced = tuple(s for i, s in enumerate(a.shape) if i != axis)

    def bw_axis(g):
        return (np.broadcast_to(np.expand_dims(g.reshape(reduced), axis), a.shape).copy(),)

    return Tensor._result(np.sum(a.data, axis=axis), (a,), "sum", bw_axis)


def tmean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / count)


def log_softmax(a, axis: int = -1) -> Tensor:
    """Row-max shifted log-softmax."""
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        soft = np.exp(out)
        return (g - soft * np.sum(g, axis=axis, keepdims=True),)

    return Tensor._result(out, (a,), "log_softmax", bw)


def pick(a, index: Sequence[int]) -> Tensor:
    """``out[i] = a[i, index[i]]`` for a 2-d tensor."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    rows = np.arange(a.shape[0])
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError("pick", a.shape, idx.shape, "need one column index per row")

    def bw(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        return (full,)

    return Tensor._result(a.data[rows, idx], (a,), "pick", bw)


def take_rows(a, rows: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(rows, dtype=np.intp)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._result(a.data[idx], (a,), "take_rows", bw)


def scatter_rows(a, rows: Sequence[int], n_rows: int) -> Tensor:
    """Zero tensor with ``n_rows`` rows whose ``rows`` are filled from ``a``."""
    a = as_tensor(a)
    idx = np.asarray(rows, dtype=np.intp)
    if idx.shape != (a.shape[0],):
        raise ShapeError("scatter_rows", a.shape, idx.shape, "one target row per source row")
    out = np.zeros((n_rows,) + a.shape[1:])
    out[idx] = a.data
    return Tensor._result(out, (a,), "scatter_rows", lambda g: (g[idx],))


def detach(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# ---------------------------------------------------------------------------
# graph traversal


def _topological(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def forward(root: Tensor) -> np.ndarray:
    """Return the cached value of an eagerly evaluated graph."""
    return root.data


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every node of ``root``'s graph that requires it.

    Gradients are reset to zero first, so repeated calls do not accumulate.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological(root)
    for node in order:
        if node.requires_grad:
            node.grad = np.zeros_like(node.data)
    if not root.requires_grad:
        return
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is not None and parent.requires_grad:
                parent.grad += g


# ---------------------------------------------------------------------------
# finite-difference oracle


def _finite_scalar(fn: Callable[[], Tensor]) -> float:
    value = fn().item()
    if not np.isfinite(value):
        raise GradcheckError(f"function value is not finite ({value})")
    return value


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradcheck(scalar_fn: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max relative error between backprop and central differences at ``point``.

    ``scalar_fn`` must be deterministic; freeze any noise before calling.
    """
    x0 = np.array(as_tensor(point).data, dtype=np.float64)
    probe = Tensor(x0.copy(), requires_grad=True)
    out = scalar_fn(probe)
    if not np.isfinite(out.item()):
        raise GradcheckError("function value is not finite at the point")
    backward(out)
    analytic = probe.grad.copy()

    numeric = np.empty_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += step
        xm[i] -= step
        fp = _finite_scalar(lambda: scalar_fn(Tensor(xp.reshape(x0.shape))))
        fm = _finite_scalar(lambda: scalar_fn(Tensor(xm.reshape(x0.shape))))
        flat[i] = (fp - fm) / (2.0 * step)
    return _rel_err(analytic, numeric)


def gradcheck_params(loss_fn: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-5) -> float:
    """Like :func:`gradcheck` but perturbs parameter tensors in place."""
    params = list(params)
    out = loss_fn()
    if not np.isfinite(out.item()):
        raise GradcheckError("loss is not finite at the point")
    backward(out)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = np.empty_like(p.data)
        flat_p = p.data.reshape(-1)
        flat_n = numeric.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + step
            fp = _finite_scalar(loss_fn)
            flat_p[i] = orig - step
            fm = _finite_scalar(loss_fn)
            flat_p[i] = orig
            flat_n[i] = (fp - fm) / (2.0 * step)
        worst = max(worst, _rel_err(analytic, numeric))
    return worst


# ---------------------------------------------------------------------------
# randomness


class RngState:
    """Seeded normal/uniform stream; children are derived by key, not by draw order."""

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed) % (1 << 64)
        self.key = tuple(int(k) for k in key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.PCG64(seq))
        self.draws = 0

    def child(self, *key: int) -> "RngState":
        return RngState(self.seed, self.key + tuple(key))

    def normal(self, shape) -> np.ndarray:
        out = self._gen.standard_normal(shape)
        self.draws += out.size
        return out

    def uniform(self, low: float, high: float, shape=None):
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int | None = None, shape=None):
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace: bool = True):
        return self._gen.choice(a, size=size, replace=replace)
