"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Conventions:
- data is a row-major float64 ndarray, copied on construction;
- tensors are treated as immutable after construction, only ``grad``
  mutates (gradient accumulation during a backward sweep, optimizer
  bookkeeping between steps);
- an op whose result contains NaN or Inf raises :class:`NumericError`.
  The one sanctioned exception is ``masked_fill``, which may write -inf
  on purpose; ``softmax`` turns those entries into exact zero weight.

The graph is rebuilt on every forward pass. A graph and the tensors it
references belong to a single thread; distinct graphs on distinct
threads do not share state.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "ComputeGraph",
    "concat",
    "stack",
    "finite_diff_check",
]


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericError(f"{op} produced a non-finite value")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (adjoint of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class Tensor:
    """A dense float64 array with optional gradient accumulation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._grad_fn = None

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _make(cls, data: np.ndarray, parents: tuple, grad_fn) -> "Tensor":
        """Internal node constructor; `data` is adopted, not copied."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        req = any(p.requires_grad for p in parents)
        out.requires_grad = req
        out._parents = parents if req else ()
        out._grad_fn = grad_fn if req else None
        return out

    @classmethod
    def zeros(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape), requires_grad=requires_grad)

    @classmethod
    def ones(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.ones(shape), requires_grad=requires_grad)

    # -- basic protocol --------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a scalar tensor")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- elementwise arithmetic -----------------------------------------------

    def _binary(self, other, fwd, bwd_a, bwd_b, op: str, check=True):
        other = _as_tensor(other)
        try:
            data = fwd(self.data, other.data)
        except ValueError as e:
            raise ShapeError(f"{op}: {e}") from None
        if check:
            _check_finite(data, op)
        a, b = self, other

        def grad_fn(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(bwd_a(g, a.data, b.data), a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(bwd_b(g, a.data, b.data), b.data.shape))

        return Tensor._make(data, (a, b), grad_fn)

    def __add__(self, other):
        return self._binary(other, lambda x, y: x + y,
                            lambda g, x, y: g, lambda g, x, y: g, "add")

    def __radd__(self, other):
        return _as_tensor(other).__add__(self)

    def __sub__(self, other):
        return self._binary(other, lambda x, y: x - y,
                            lambda g, x, y: g, lambda g, x, y: -g, "sub")

    def __rsub__(self, other):
        return _as_tensor(other).__sub__(self)

    def __mul__(self, other):
        return self._binary(other, lambda x, y: x * y,
                            lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")

    def __rmul__(self, other):
        return _as_tensor(other).__mul__(self)

    def __truediv__(self, other):
        return self._binary(other, lambda x, y: x / y,
                            lambda g, x, y: g / y,
                            lambda g, x, y: -g * x / (y * y), "div")

    def __rtruediv__(self, other):
        return _as_tensor(other).__truediv__(self)

    def __neg__(self):
        return self * -1.0

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise ContractError("only scalar exponents are supported")
        data = self.data ** p
        _check_finite(data, "pow")
        a = self

        def grad_fn(g):
            a._accumulate(g * p * a.data ** (p - 1))

        return Tensor._make(data, (a,), grad_fn)

    # -- unary ops --------------------------------------------------------------

    def _unary(self, fwd, bwd, op: str, check=True):
        data = fwd(self.data)
        if check:
            _check_finite(data, op)
        a = self

        def grad_fn(g):
            a._accumulate(bwd(g, a.data, data))

        return Tensor._make(data, (a,), grad_fn)

    def exp(self):
        return self._unary(np.exp, lambda g, x, y: g * y, "exp")

    def log(self):
        return self._unary(np.log, lambda g, x, y: g / x, "log")

    def sqrt(self):
        return self._unary(np.sqrt, lambda g, x, y: g * 0.5 / y, "sqrt")

    def sigmoid(self):
        def fwd(x):
            out = np.empty_like(x)
            pos = x >= 0
            out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
            ex = np.exp(x[~pos])
            out[~pos] = ex / (1.0 + ex)
            return out

        return self._unary(fwd, lambda g, x, y: g * y * (1.0 - y), "sigmoid")

    def relu(self):
        return self._unary(lambda x: np.maximum(x, 0.0),
                           lambda g, x, y: g * (x > 0), "relu")

    def clip(self, lo: float, hi: float):
        def bwd(g, x, y):
            return g * ((x >= lo) & (x <= hi))

        return self._unary(lambda x: np.clip(x, lo, hi), bwd, "clip")

    # -- reductions ---------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)
        data = np.asarray(data)
        _check_finite(data, "sum")
        a = self

        def grad_fn(g):
            a._accumulate(_expand_reduced(g, a.data.shape, axis, keepdims))

        return Tensor._make(data, (a,), grad_fn)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else _axis_size(self.data.shape, axis)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape ops ------------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        try:
            data = self.data.reshape(shape)
        except ValueError as e:
            raise ShapeError(f"reshape: {e}") from None
        a = self

        def grad_fn(g):
            a._accumulate(g.reshape(a.data.shape))

        return Tensor._make(data, (a,), grad_fn)

    def transpose(self, axes=None):
        data = self.data.transpose(axes)
        a = self
        inv = None if axes is None else np.argsort(axes)

        def grad_fn(g):
            a._accumulate(g.transpose(inv) if inv is not None else g.transpose())

        return Tensor._make(data, (a,), grad_fn)

    @property
    def T(self):
        return self.transpose()

    def narrow(self, axis: int, start: int, length: int):
        """Contiguous slice `[start, start+length)` along one axis."""
        if start < 0 or start + length > self.data.shape[axis]:
            raise ShapeError("narrow out of range")
        index = [slice(None)] * self.data.ndim
        index[axis] = slice(start, start + length)
        index = tuple(index)
        data = self.data[index]
        a = self

        def grad_fn(g):
            full = np.zeros_like(a.data)
            full[index] = g
            a._accumulate(full)

        return Tensor._make(data, (a,), grad_fn)

    def take_rows(self, indices):
        """Gather rows along axis 0; duplicate indices sum their gradients."""
        idx = np.asarray(indices, dtype=np.intp)
        if idx.size and (idx.min() < 0 or idx.max() >= self.data.shape[0]):
            raise ShapeError("take_rows index out of range")
        data = self.data[idx]
        a = self

        def grad_fn(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accumulate(full)

        return Tensor._make(data, (a,), grad_fn)

    # -- matrix product -----------------------------------------------------------

    def matmul(self, other: "Tensor"):
        other = _as_tensor(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ShapeError("matmul expects 2-D operands")
        if self.data.shape[1] != other.data.shape[0]:
            raise ShapeError(
                f"matmul inner dims disagree: {self.data.shape} x {other.data.shape}")
        data = self.data @ other.data
        _check_finite(data, "matmul")
        a, b = self, other

        def grad_fn(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

        return Tensor._make(data, (a, b), grad_fn)

    def __matmul__(self, other):
        return self.matmul(other)

    # -- masking and softmax -----------------------------------------------------

    def masked_fill(self, mask, value: float):
        """Keep entries where `mask` is nonzero, write `value` elsewhere.

        `value` may be -inf (attention masking); no finite check is applied
        to the output. The mask itself carries no gradient.
        """
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        if m.shape != self.data.shape:
            raise ShapeError("masked_fill mask shape mismatch")
        keep = m != 0
        data = np.where(keep, self.data, value)
        a = self

        def grad_fn(g):
            a._accumulate(g * keep)

        return Tensor._make(data, (a,), grad_fn)

    def softmax(self, axis: int = -1):
        """Stable softmax; -inf entries get zero weight, an all--inf slice
        yields all zeros (callers define their own fallback)."""
        x = self.data
        if np.isnan(x).any() or np.isposinf(x).any():
            raise NumericError("softmax input contains NaN or +inf")
        m = np.max(x, axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.exp(x - m)
        s = e.sum(axis=axis, keepdims=True)
        data = e / np.where(s == 0.0, 1.0, s)
        a = self

        def grad_fn(g):
            dot = (g * data).sum(axis=axis, keepdims=True)
            a._accumulate((g - dot) * data)

        return Tensor._make(data, (a,), grad_fn)

    # -- autodiff -------------------------------------------------------------------

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self):
        """Reverse sweep from a scalar root; leaves with requires_grad
        accumulate dRoot/dLeaf into `.grad`."""
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar root")
        graph = ComputeGraph(self)
        graph.run(seed=np.ones_like(self.data))


class ComputeGraph:
    """Topologically ordered operation records reachable from a root.

    The backward sweep visits each node exactly once, in reverse
    topological order; a node's gradient is the sum of the contributions
    pushed by all of its consumers.
    """

    def __init__(self, root: Tensor):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.root = root
        self.nodes = order  # topological: parents before consumers

    def run(self, seed: np.ndarray):
        self.root._accumulate(seed)
        for node in reversed(self.nodes):
            if node._grad_fn is not None and node.grad is not None:
                node._grad_fn(node.grad)


# -- free functions ---------------------------------------------------------------


def _axis_size(shape, axis) -> int:
    if isinstance(axis, int):
        axis = (axis,)
    n = 1
    for ax in axis:
        n *= shape[ax]
    return n


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape).copy() if keepdims or g.ndim == 0 \
            else np.full(shape, float(g))
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of zero tensors")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    sizes = [t.data.shape[axis] for t in tensors]
    parents = tuple(tensors)

    def grad_fn(g):
        offset = 0
        for t, n in zip(parents, sizes):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(offset, offset + n)
                t._accumulate(g[tuple(index)])
            offset += n

    return Tensor._make(data, parents, grad_fn)


def stack(tensors, axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = _as_tensor(t)
        shape = list(t.data.shape)
        shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
        expanded.append(t.reshape(shape))
    return concat(expanded, axis=axis)


def finite_diff_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Compare reverse-mode gradient of scalar-valued `f` at `x` against
    central finite differences.

    Returns max over coordinates of |analytic - numeric| / max(|analytic|, 1e-8).
    """
    if h <= 0:
        raise ContractError("step h must be positive")
    base = Tensor(x.data, requires_grad=True)
    out = f(base)
    if out.data.size != 1:
        raise ContractError("finite_diff_check needs a scalar-valued map")
    if not np.isfinite(out.data).all():
        raise NumericError("map produced a non-finite value")
    out.backward()
    analytic = (base.grad if base.grad is not None
                else np.zeros_like(base.data)).ravel()

    def probe(flat_values):
        val = f(Tensor(flat_values.reshape(x.data.shape))).data
        if not np.isfinite(val).all():
            raise NumericError("map produced a non-finite value")
        return float(val.reshape(()))

    flat = x.data.ravel()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        up = flat.copy()
        up[i] += h
        dn = flat.copy()
        dn[i] -= h
        numeric[i] = (probe(up) - probe(dn)) / (2.0 * h)

    err = np.abs(analytic - numeric) / np.maximum(np.abs(analytic), 1e-8)
    return float(err.max()) if err.size else 0.0
