"""Reverse-mode automatic differentiation over dense 2-d float64 arrays.

The engine is deliberately small: every value is a 2-d float64 matrix
(scalars are 1x1), graphs are built eagerly by the op functions below, and
``backward`` replays the graph once in reverse topological order. This is
enough to differentiate every loss and attack objective in the package,
including log-determinants of SPD matrices with exact gradients.

Dense factorizations are delegated to LAPACK via numpy/scipy; the graph
bookkeeping and all vector-Jacobian rules are local to this module.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import cho_solve

from .errors import GraphCycle, NotPositiveDefinite, ShapeMismatch

_PIVOT_FLOOR = 1e-12
_SYMMETRY_TOL = 1e-10


def as_matrix(a) -> np.ndarray:
    """Coerce to a C-contiguous 2-d float64 array; scalars become 1x1.

    The layout normalization matters: BLAS picks different accumulation
    orders for C- vs F-ordered operands, and run-for-run determinism
    requires graph inputs to be layout-identical, not just value-identical.
    """
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(1, -1)
    elif m.ndim != 2:
        raise ShapeMismatch(f"expected at most 2 dimensions, got shape {m.shape}")
    return np.ascontiguousarray(m)


class Node:
    """One vertex of a differentiation graph.

    ``parents`` and ``vjp`` describe how the gradient at this node maps back
    to its inputs; leaves (no parents) are either differentiable inputs
    (``needs_grad=True``) or constants.
    """

    __slots__ = ("value", "parents", "vjp", "needs_grad")

    def __init__(self, value: np.ndarray, parents=(), vjp=None, needs_grad=False):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value[0, 0])

    # operator sugar; scalars and ndarrays are promoted to constants
    def __add__(self, other):
        return add(self, _promote(other))

    def __radd__(self, other):
        return add(_promote(other), self)

    def __sub__(self, other):
        return sub(self, _promote(other))

    def __rsub__(self, other):
        return sub(_promote(other), self)

    def __mul__(self, other):
        return mul(self, _promote(other))

    def __rmul__(self, other):
        return mul(_promote(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _promote(other))

    @property
    def T(self):
        return transpose(self)


def leaf(a) -> Node:
    """Differentiable input; entries must be finite."""
    m = as_matrix(a)
    if not np.isfinite(m).all():
        raise ValueError("leaf matrix has non-finite entries")
    return Node(m, needs_grad=True)


def constant(a) -> Node:
    m = as_matrix(a)
    if not np.isfinite(m).all():
        raise ValueError("constant matrix has non-finite entries")
    return Node(m)


def _promote(x) -> Node:
    if isinstance(x, Node):
        return x
    return Node(as_matrix(x))


def _interior(value, parents, vjp) -> Node:
    needs = any(p.needs_grad for p in parents)
    return Node(value, tuple(parents), vjp if needs else None, needs_grad=needs)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum grad back down to a broadcast operand's shape."""
    if grad.shape == shape:
        return grad
    out = grad
    if shape[0] == 1 and grad.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    if out.shape != shape:
        raise ShapeMismatch(f"cannot reduce grad {grad.shape} to {shape}")
    return out


def _check_broadcastable(a: np.ndarray, b: np.ndarray):
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeMismatch(f"shapes {a.shape} and {b.shape} do not align")


def add(x: Node, y: Node) -> Node:
    _check_broadcastable(x.value, y.value)
    out = x.value + y.value

    def vjp(g):
        return (_unbroadcast(g, x.shape) if x.needs_grad else None,
                _unbroadcast(g, y.shape) if y.needs_grad else None)

    return _interior(out, (x, y), vjp)


def sub(x: Node, y: Node) -> Node:
    _check_broadcastable(x.value, y.value)
    out = x.value - y.value

    def vjp(g):
        return (_unbroadcast(g, x.shape) if x.needs_grad else None,
                _unbroadcast(-g, y.shape) if y.needs_grad else None)

    return _interior(out, (x, y), vjp)


def mul(x: Node, y: Node) -> Node:
    """Elementwise product with 1-row/1-column broadcasting."""
    _check_broadcastable(x.value, y.value)
    out = x.value * y.value

    def vjp(g):
        return (_unbroadcast(g * y.value, x.shape) if x.needs_grad else None,
                _unbroadcast(g * x.value, y.shape) if y.needs_grad else None)

    return _interior(out, (x, y), vjp)


def scale(x: Node, s: float) -> Node:
    s = float(s)
    out = x.value * s

    def vjp(g):
        return (g * s,)

    return _interior(out, (x,), vjp)


def matmul(x: Node, y: Node) -> Node:
    if x.shape[1] != y.shape[0]:
        raise ShapeMismatch(f"matmul {x.shape} @ {y.shape}")
    out = x.value @ y.value

    def vjp(g):
        return (g @ y.value.T if x.needs_grad else None,
                x.value.T @ g if y.needs_grad else None)

    return _interior(out, (x, y), vjp)


def transpose(x: Node) -> Node:
    out = np.ascontiguousarray(x.value.T)

    def vjp(g):
        return (np.ascontiguousarray(g.T),)

    return _interior(out, (x,), vjp)


def relu(x: Node) -> Node:
    out = np.maximum(x.value, 0.0)

    def vjp(g):
        return (g * (x.value > 0.0),)

    return _interior(out, (x,), vjp)


def tanh(x: Node) -> Node:
    out = np.tanh(x.value)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _interior(out, (x,), vjp)


def sum_all(x: Node) -> Node:
    out = np.array([[x.value.sum()]])

    def vjp(g):
        return (np.full(x.shape, g[0, 0]),)

    return _interior(out, (x,), vjp)


def mean_all(x: Node) -> Node:
    n = x.value.size
    return scale(sum_all(x), 1.0 / n)


def sum_rows(x: Node) -> Node:
    """Row sums, returned as a column (m, 1)."""
    out = x.value.sum(axis=1, keepdims=True)

    def vjp(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _interior(out, (x,), vjp)


def sum_cols(x: Node) -> Node:
    """Column sums, returned as a row (1, n)."""
    out = x.value.sum(axis=0, keepdims=True)

    def vjp(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _interior(out, (x,), vjp)


def trace(x: Node) -> Node:
    if x.shape[0] != x.shape[1]:
        raise ShapeMismatch(f"trace of non-square {x.shape}")
    out = np.array([[np.trace(x.value)]])
    n = x.shape[0]

    def vjp(g):
        return (np.eye(n) * g[0, 0],)

    return _interior(out, (x,), vjp)


def hstack(nodes: Sequence[Node]) -> Node:
    if not nodes:
        raise ShapeMismatch("hstack of zero matrices")
    rows = nodes[0].shape[0]
    if any(n.shape[0] != rows for n in nodes):
        raise ShapeMismatch("hstack row counts differ")
    out = np.concatenate([n.value for n in nodes], axis=1)
    splits = np.cumsum([n.shape[1] for n in nodes])[:-1]

    def vjp(g):
        parts = np.split(g, splits, axis=1)
        return tuple(p if n.needs_grad else None for p, n in zip(parts, nodes))

    return _interior(out, tuple(nodes), vjp)


def logsumexp_cols(x: Node) -> Node:
    """Stable log-sum-exp down each column, returned as (1, n)."""
    m = x.value.max(axis=0, keepdims=True)
    e = np.exp(x.value - m)
    s = e.sum(axis=0, keepdims=True)
    out = m + np.log(s)
    soft = e / s

    def vjp(g):
        return (soft * g,)

    return _interior(out, (x,), vjp)


def logsumexp_rows_offdiag(x: Node) -> Node:
    """Log-sum-exp along each row excluding the diagonal entry, as (m, 1).

    This is the NT-Xent denominator: every anchor sums over all other
    embeddings but never over itself.
    """
    if x.shape[0] != x.shape[1]:
        raise ShapeMismatch(f"off-diagonal logsumexp needs a square matrix, got {x.shape}")
    masked = x.value.copy()
    np.fill_diagonal(masked, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    e = np.exp(masked - m)
    s = e.sum(axis=1, keepdims=True)
    out = m + np.log(s)
    soft = e / s

    def vjp(g):
        return (soft * g,)

    return _interior(out, (x,), vjp)


def normalize_cols(x: Node, guard: float = 1e-12) -> Node:
    """Scale every column to unit l2 norm.

    Columns with norm below ``guard`` are replaced by the first basis vector
    and treated as constants (zero gradient), so cosine terms never see NaN.
    """
    norms = np.linalg.norm(x.value, axis=0, keepdims=True)
    degenerate = norms[0] < guard
    safe = np.where(degenerate, 1.0, norms[0])[None, :]
    out = x.value / safe
    if degenerate.any():
        out = out.copy()
        out[:, degenerate] = 0.0
        out[0, degenerate] = 1.0
    unit = out

    def vjp(g):
        # d(x/|x|) = (I - u u^T)/|x| applied columnwise
        dots = (g * unit).sum(axis=0, keepdims=True)
        gx = (g - unit * dots) / safe
        if degenerate.any():
            gx = gx.copy()
            gx[:, degenerate] = 0.0
        return (gx,)

    return _interior(out, (x,), vjp)


def column_gather(x: Node, index: np.ndarray, weight: np.ndarray) -> Node:
    """Per-column sparse linear map: out[p, j] = sum_k weight[j,p,k] * x[index[j,p,k], j].

    ``index``/``weight`` have shape (n, out_rows, k) and are constants; this
    is the differentiable crop-and-resize used when an attack must reach
    back through view extraction to the source image.
    """
    n = x.shape[1]
    if index.shape[0] != n or index.shape != weight.shape:
        raise ShapeMismatch(
            f"gather tables {index.shape}/{weight.shape} do not match {n} columns")
    xt = x.value.T  # (n, rows)
    gathered = xt[np.arange(n)[:, None, None], index]  # (n, out_rows, k)
    out = np.ascontiguousarray((gathered * weight).sum(axis=2).T)

    def vjp(g):
        gt = g.T  # (n, out_rows)
        acc = np.zeros((n, x.shape[0]))
        np.add.at(acc, (np.arange(n)[:, None, None], index), weight * gt[:, :, None])
        return (np.ascontiguousarray(acc.T),)

    return _interior(out, (x,), vjp)


def cholesky_spd(m: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    Pivots (squared diagonal of L) at or below 1e-12 mean the covariance is
    degenerate; that is reported rather than silently regularized.
    """
    m = as_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise ShapeMismatch(f"cholesky of non-square {m.shape}")
    if np.abs(m - m.T).max() > _SYMMETRY_TOL:
        raise ValueError("matrix is not symmetric within 1e-10")
    try:
        low = np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite("cholesky failed: matrix is not positive definite") from None
    pivots = np.diag(low) ** 2
    if pivots.min() <= _PIVOT_FLOOR:
        raise NotPositiveDefinite(
            f"pivot {pivots.min():.3e} at or below floor {_PIVOT_FLOOR:.0e}")
    return low


def logdet_spd(m):
    """log det of an SPD matrix; differentiable when given a Node.

    The gradient is the (symmetrized) inverse, obtained from the Cholesky
    factor already computed for the forward value.
    """
    if not isinstance(m, Node):
        low = cholesky_spd(m)
        return 2.0 * float(np.log(np.diag(low)).sum())

    low = cholesky_spd(m.value)
    out = np.array([[2.0 * np.log(np.diag(low)).sum()]])

    def vjp(g):
        inv = cho_solve((low, True), np.eye(low.shape[0]))
        return (g[0, 0] * 0.5 * (inv + inv.T),)

    return _interior(out, (m,), vjp)


def _toposort(root: Node) -> list[Node]:
    """Iterative DFS post-order; raises GraphCycle on a back edge."""
    order: list[Node] = []
    state: dict[int, int] = {}  # 0 = visiting, 1 = done
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        nid = id(node)
        if expanded:
            state[nid] = 1
            order.append(node)
            continue
        mark = state.get(nid)
        if mark == 1:
            continue
        if mark == 0:
            raise GraphCycle("differentiation graph contains a cycle")
        state[nid] = 0
        stack.append((node, True))
        for p in node.parents:
            pmark = state.get(id(p))
            if pmark == 0:
                raise GraphCycle("differentiation graph contains a cycle")
            if pmark is None:
                stack.append((p, False))
    return order


def backward(root: Node, leaves: Iterable[Node] | None = None) -> dict[Node, np.ndarray]:
    """Gradients of a 1x1 root with respect to differentiable leaves.

    Returns a map keyed by leaf Node. With ``leaves`` given, every requested
    leaf appears in the map (zeros if the root does not depend on it);
    otherwise all reachable differentiable leaves are returned.
    """
    if root.shape != (1, 1):
        raise ShapeMismatch(f"backward needs a scalar root, got {root.shape}")
    if not np.isfinite(root.value[0, 0]):
        raise ValueError("backward called on a non-finite root")
    order = _toposort(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones((1, 1))}
    out: dict[Node, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            if node.needs_grad:
                out[node] = out[node] + g if node in out else g
            continue
        if node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.needs_grad:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    if leaves is not None:
        for lf in leaves:
            if lf not in out:
                out[lf] = np.zeros(lf.shape)
    return out
