"""Minimal reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` wraps an ndarray and records the operations that produced it on a
tape of parent links and backward closures. Calling :meth:`Tensor.backward` on
a scalar result walks the tape in reverse topological order and accumulates
gradients into ``.grad`` (an ndarray of the same shape as ``.data``) for every
node that requires gradients, intermediates included.

Only the operations needed by this package are implemented. All ops are
broadcast-aware where numpy broadcasts, and gradients are reduced back to the
parent shapes. Dtypes follow numpy promotion; python scalars do not widen
float32 graphs. Graphs are pruned eagerly: an op whose inputs all have
``requires_grad=False`` produces a constant leaf, so frozen submodules run at
plain numpy speed.
"""

from __future__ import annotations

from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "finite_checks",
    "astensor",
    "affine_tanh",
    "bilinear_gather",
    "concat",
    "compute_gradients",
]


class NonFiniteError(RuntimeError):
    """Raised when a checked computation produces NaN or infinity."""

    def __init__(self, op: str):
        super().__init__(f"non-finite values produced by op '{op}'")
        self.op = op


_FINITE_CHECKS = [False]


class finite_checks:
    """Context manager enabling per-op finite checks inside the block.

    While active, every Tensor op validates its output and raises
    :class:`NonFiniteError` naming the offending op. Off by default because the
    checks cost a full pass over every intermediate.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled

    def __enter__(self):
        self._saved = _FINITE_CHECKS[0]
        _FINITE_CHECKS[0] = self.enabled
        return self

    def __exit__(self, *exc):
        _FINITE_CHECKS[0] = self._saved
        return False


def _check(out: np.ndarray, op: str) -> None:
    if _FINITE_CHECKS[0] and not np.all(np.isfinite(out)):
        raise NonFiniteError(op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
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


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 _parents: tuple = (), _backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = _parents
        self._backward = _backward

    # -- basic properties -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        return float(self.data)

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _make(data, parents, backward, op):
        _check(data, op)
        req = any(p.requires_grad for p in parents)
        if not req:
            return Tensor(data, requires_grad=False, op=op)
        return Tensor(data, requires_grad=True, op=op, _parents=parents,
                      _backward=backward)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            out_data = self.data + other.data

            def backward(g, a=self, b=other):
                if a.requires_grad:
                    _accum(a, _unbroadcast(g, a.data.shape))
                if b.requires_grad:
                    _accum(b, _unbroadcast(g, b.data.shape))

            return Tensor._make(out_data, (self, other), backward, "add")
        out_data = self.data + other

        def backward(g, a=self):
            _accum(a, _unbroadcast(g, a.data.shape))

        return Tensor._make(out_data, (self,), backward, "add")

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            out_data = self.data - other.data

            def backward(g, a=self, b=other):
                if a.requires_grad:
                    _accum(a, _unbroadcast(g, a.data.shape))
                if b.requires_grad:
                    _accum(b, _unbroadcast(-g, b.data.shape))

            return Tensor._make(out_data, (self, other), backward, "sub")
        out_data = self.data - other

        def backward(g, a=self):
            _accum(a, _unbroadcast(g, a.data.shape))

        return Tensor._make(out_data, (self,), backward, "sub")

    def __rsub__(self, other):
        out_data = other - self.data

        def backward(g, a=self):
            _accum(a, _unbroadcast(-g, a.data.shape))

        return Tensor._make(out_data, (self,), backward, "rsub")

    def __neg__(self):
        def backward(g, a=self):
            _accum(a, -g)

        return Tensor._make(-self.data, (self,), backward, "neg")

    def __mul__(self, other):
        if isinstance(other, Tensor):
            out_data = self.data * other.data

            def backward(g, a=self, b=other):
                if a.requires_grad:
                    _accum(a, _unbroadcast(g * b.data, a.data.shape))
                if b.requires_grad:
                    _accum(b, _unbroadcast(g * a.data, b.data.shape))

            return Tensor._make(out_data, (self, other), backward, "mul")
        out_data = self.data * other

        def backward(g, a=self, k=other):
            _accum(a, _unbroadcast(g * k, a.data.shape))

        return Tensor._make(out_data, (self,), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            out_data = self.data / other.data

            def backward(g, a=self, b=other):
                if a.requires_grad:
                    _accum(a, _unbroadcast(g / b.data, a.data.shape))
                if b.requires_grad:
                    _accum(b, _unbroadcast(-g * a.data / (b.data * b.data),
                                           b.data.shape))

            return Tensor._make(out_data, (self, other), backward, "div")
        return self * (1.0 / other)

    def __rtruediv__(self, other):
        out_data = other / self.data

        def backward(g, a=self, k=other):
            _accum(a, _unbroadcast(-g * k / (a.data * a.data), a.data.shape))

        return Tensor._make(out_data, (self,), backward, "rdiv")

    def __pow__(self, k):
        if not isinstance(k, (int, float, np.integer, np.floating)):
            raise TypeError("only scalar exponents are supported")
        out_data = self.data ** k

        def backward(g, a=self, k=k):
            _accum(a, g * (k * a.data ** (k - 1)))

        return Tensor._make(out_data, (self,), backward, "pow")

    def __matmul__(self, other):
        if not isinstance(other, Tensor):
            other = Tensor(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ValueError("matmul supports 2D operands only")
        out_data = self.data @ other.data

        def backward(g, a=self, b=other):
            if a.requires_grad:
                _accum(a, g @ b.data.T)
            if b.requires_grad:
                _accum(b, a.data.T @ g)

        return Tensor._make(out_data, (self, other), backward, "matmul")

    # -- pointwise nonlinearities -------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def backward(g, a=self, o=out_data):
            _accum(a, g * o)

        return Tensor._make(out_data, (self,), backward, "exp")

    def log(self):
        out_data = np.log(self.data)

        def backward(g, a=self):
            _accum(a, g / a.data)

        return Tensor._make(out_data, (self,), backward, "log")

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def backward(g, a=self, o=out_data):
            _accum(a, g * (0.5 / o))

        return Tensor._make(out_data, (self,), backward, "sqrt")

    def tanh(self):
        out_data = np.tanh(self.data)

        def backward(g, a=self, o=out_data):
            _accum(a, g * (1.0 - o * o))

        return Tensor._make(out_data, (self,), backward, "tanh")

    def sigmoid(self):
        out_data = _stable_sigmoid(self.data)

        def backward(g, a=self, o=out_data):
            _accum(a, g * (o * (1.0 - o)))

        return Tensor._make(out_data, (self,), backward, "sigmoid")

    def softplus(self):
        out_data = np.logaddexp(0.0, self.data)

        def backward(g, a=self):
            _accum(a, g * _stable_sigmoid(a.data))

        return Tensor._make(out_data, (self,), backward, "softplus")

    def clip(self, lo, hi):
        """Clamp values to [lo, hi]; gradient passes only where unclamped."""
        out_data = np.clip(self.data, lo, hi)
        inside = np.ones_like(self.data, dtype=bool)
        if lo is not None:
            inside &= self.data >= lo
        if hi is not None:
            inside &= self.data <= hi

        def backward(g, a=self, m=inside):
            _accum(a, np.where(m, g, 0.0))

        return Tensor._make(out_data, (self,), backward, "clip")

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g, a=self, axis=axis, keepdims=keepdims):
            if axis is None:
                ga = np.broadcast_to(g, a.data.shape)
            else:
                if not keepdims:
                    g = np.expand_dims(g, axis)
                ga = np.broadcast_to(g, a.data.shape)
            _accum(a, ga)

        return Tensor._make(out_data, (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        elif isinstance(axis, tuple):
            n = int(np.prod([self.data.shape[i] for i in axis]))
        else:
            n = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def cumsum(self, axis: int):
        out_data = np.cumsum(self.data, axis=axis)

        def backward(g, a=self, axis=axis):
            rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
            _accum(a, rev)

        return Tensor._make(out_data, (self,), backward, "cumsum")

    # -- shape & indexing -------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)

        def backward(g, a=self):
            _accum(a, g.reshape(a.data.shape))

        return Tensor._make(out_data, (self,), backward, "reshape")

    def transpose(self, axes=None):
        out_data = np.transpose(self.data, axes)
        if axes is None:
            inv = None
        else:
            inv = tuple(np.argsort(axes))

        def backward(g, a=self, inv=inv):
            _accum(a, np.transpose(g, inv))

        return Tensor._make(out_data, (self,), backward, "transpose")

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, idx):
        out_data = self.data[idx]

        def backward(g, a=self, idx=idx):
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            _accum(a, ga)

        return Tensor._make(out_data, (self,), backward, "getitem")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def _accum(node: Tensor, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = g
    else:
        node.grad = node.grad + g


def astensor(x, dtype=None, requires_grad: bool = False) -> Tensor:
    if isinstance(x, Tensor):
        if dtype is not None and x.data.dtype != dtype:
            return Tensor(x.data.astype(dtype), requires_grad=x.requires_grad)
        return x
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=requires_grad)


def affine_tanh(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused ``tanh(x @ w + b)`` for 2D ``x`` and ``w``.

    Equivalent to the composed ops but built as a single graph node: the
    forward pass reuses one buffer for the affine result and the activation,
    and the backward pass computes the three input gradients directly. This is
    the inner loop of every multi-layer perceptron here, where the composed
    form spends most of its time allocating intermediates.
    """
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ValueError("affine_tanh supports 2D x and w only")
    if b.data.ndim != 1:
        raise ValueError("affine_tanh expects a 1D bias")
    buf = x.data @ w.data
    np.add(buf, b.data, out=buf)
    out_data = np.tanh(buf, out=buf)

    def backward(g, a=x, ww=w, bb=b, o=out_data):
        gh = g * (1.0 - o * o)
        if bb.requires_grad:
            _accum(bb, gh.sum(axis=0))
        if ww.requires_grad:
            _accum(ww, a.data.T @ gh)
        if a.requires_grad:
            _accum(a, gh @ ww.data.T)

    return Tensor._make(out_data, (x, w, b), backward, "affine_tanh")


def bilinear_gather(flat: Tensor, u: Tensor, v: Tensor, n: int) -> Tensor:
    """Bilinearly interpolate rows of a flattened ``(n*n, C)`` grid.

    ``u`` indexes the first grid axis and ``v`` the second, both 1D and
    already clamped to ``[0, n-1]``; cell corners are looked up at
    ``iu*n + iv``. Fused gather + two-axis lerp as a single graph node: the
    composed form adds a dozen nodes per call and scatters each corner
    separately, which dominates feature-sampling time.
    """
    if flat.data.ndim != 2 or u.data.ndim != 1 or v.data.ndim != 1:
        raise ValueError("bilinear_gather expects flat (n*n, C), u (P,), v (P,)")
    ud, vd = u.data, v.data
    iu = np.clip(ud.astype(np.int64), 0, n - 2)
    iv = np.clip(vd.astype(np.int64), 0, n - 2)
    p = ud.shape[0]
    base = iu * n + iv
    idx = np.concatenate([base, base + 1, base + n, base + n + 1])
    corners = flat.data.take(idx, axis=0)
    c00, c01 = corners[:p], corners[p:2 * p]
    c10, c11 = corners[2 * p:3 * p], corners[3 * p:]
    tu = (ud - iu.astype(ud.dtype)).reshape(-1, 1)
    tv = (vd - iv.astype(vd.dtype)).reshape(-1, 1)
    omu, omv = 1.0 - tu, 1.0 - tv
    top = c00 * omv + c01 * tv
    bot = c10 * omv + c11 * tv
    out_data = top * omu + bot * tu

    def backward(g, fl=flat, uu=u, vv=v):
        if fl.requires_grad:
            gw = np.concatenate(
                [g * (omu * omv), g * (omu * tv), g * (tu * omv), g * (tu * tv)],
                axis=0)
            acc = np.zeros_like(fl.data)
            np.add.at(acc, idx, gw)
            _accum(fl, acc)
        if uu.requires_grad:
            _accum(uu, ((bot - top) * g).sum(axis=1))
        if vv.requires_grad:
            gv = ((c01 - c00) * omu + (c11 - c10) * tu) * g
            _accum(vv, gv.sum(axis=1))

    return Tensor._make(out_data, (flat, u, v), backward, "bilinear_gather")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g, parts=tensors, offs=offsets, axis=axis):
        sl = [slice(None)] * g.ndim
        for t, lo, hi in zip(parts, offs[:-1], offs[1:]):
            if t.requires_grad:
                sl[axis] = slice(int(lo), int(hi))
                _accum(t, g[tuple(sl)])

    return Tensor._make(out_data, tuple(tensors), backward, "concat")


def _toposort(root: Tensor) -> list:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Backpropagate from a scalar root; fills ``.grad`` on reachable nodes."""
    if root.data.size != 1:
        raise ValueError("backward requires a scalar root")
    if not root.requires_grad:
        raise ValueError("root does not require gradients")
    order = _toposort(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


Tensor.backward = lambda self: backward(self)


def compute_gradients(loss: Tensor,
                      params: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]],
                      ) -> dict[str, np.ndarray]:
    """Backprop from ``loss`` and return ``{name: gradient}`` for ``params``.

    The loss must be a finite scalar; a NaN/inf loss raises
    :class:`NonFiniteError` rather than propagating silently. Parameters not
    reached by the graph get zero gradients. Param ``.grad`` attributes are
    left clean (None) on exit, so repeated calls never observe stale values.
    """
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError("loss")
    items = list(params.items()) if isinstance(params, Mapping) else list(params)
    for _, p in items:
        p.grad = None
    backward(loss)
    out = {}
    for name, p in items:
        if p.grad is None:
            out[name] = np.zeros_like(p.data)
        else:
            out[name] = p.grad
        p.grad = None
    return out
