"""Reverse-mode differentiation on an append-only tape.

Every recorded value holds a numpy array (0-d for scalars) and all primitive
operations act elementwise, so one tape node stands for a batch of scalar
operations that share a local derivative rule.  Functions in this module accept
plain numbers/arrays as well; when no argument is a :class:`DiffValue` they
compute the plain result and record nothing, which lets geometry and field code
run unchanged with or without a tape.

Kinks follow one convention: ``maximum``/``minimum``/``abs``/``relu`` route the
whole derivative to the active argument, and at exact ties to the first one.
Each such gated node keeps its branch outcome so :func:`gradcheck` can tell when
a finite-difference probe crosses a branch boundary.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DomainError(ArithmeticError):
    """An operation was evaluated outside its domain (log of <=0, x/0, ...)."""


class TapeError(ValueError):
    """A handle was used with a tape it does not belong to."""


def _arr(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class DiffValue:
    """A value recorded on a :class:`Tape`."""

    __slots__ = ("value", "tape", "index", "parents", "vjp")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, value, tape: "Tape", parents=(), vjp=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def __float__(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"DiffValue({self.value!r}, node={self.index})"

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __matmul__ = lambda a, b: matmul(a, b)
    __rmatmul__ = lambda a, b: matmul(b, a)
    __neg__ = lambda a: neg(a)
    __getitem__ = lambda a, idx: getitem(a, idx)

    def __pow__(self, p):
        return power(self, p)

    @property
    def T(self):
        return transpose(self)


@dataclass
class Tape:
    """Append-only record of operations.

    ``gates`` holds ``(node, outcome)`` for every branch-selecting node and
    ``decisions`` holds discrete choices that callers made outside the tape
    (for instance a ray-marching bracket search).
    """

    nodes: list = field(default_factory=list)
    gates: list = field(default_factory=list)
    decisions: list = field(default_factory=list)
    visits: int = 0

    def variable(self, value) -> DiffValue:
        return DiffValue(np.array(value, dtype=np.float64), self)

    def record_decision(self, name: str, outcome) -> None:
        self.decisions.append((name, np.array(outcome)))

    def backward(self, root: DiffValue) -> dict[int, np.ndarray]:
        """One reverse sweep from ``root``; returns adjoints keyed by node index."""
        if not isinstance(root, DiffValue) or root.tape is not self:
            raise TapeError("root is not recorded on this tape")
        if root.value.size != 1:
            raise ValueError("root must be a scalar")
        adj: dict[int, np.ndarray] = {root.index: np.ones_like(root.value)}
        nodes = self.nodes
        visits = 0
        for i in range(root.index, -1, -1):
            g = adj.get(i)
            if g is None:
                continue
            node = nodes[i]
            visits += 1
            if not node.parents:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                j = parent.index
                if j in adj:
                    adj[j] = adj[j] + pg
                else:
                    adj[j] = pg
        self.visits = visits
        return adj


def tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, DiffValue):
            return x.tape
        if isinstance(x, (list, tuple)):
            t = tape_of(*x)
            if t is not None:
                return t
    return None


def value_of(x):
    """Strip the tape: DiffValue -> ndarray, containers elementwise."""
    if isinstance(x, DiffValue):
        return x.value
    if isinstance(x, (list, tuple)):
        return type(x)(value_of(v) for v in x)
    return x


def gradient_of(root: DiffValue, wrt: Sequence[DiffValue]) -> np.ndarray:
    """Flattened concatenation of d root / d leaf over ``wrt``."""
    tape = root.tape
    for leaf in wrt:
        if not isinstance(leaf, DiffValue) or leaf.tape is not tape:
            raise TapeError("leaf belongs to a different tape")
    adj = tape.backward(root)
    parts = [np.broadcast_to(adj.get(leaf.index, 0.0), leaf.shape).ravel() for leaf in wrt]
    return np.concatenate(parts) if parts else np.zeros(0)


# ---------------------------------------------------------------------------
# primitive construction helpers
# ---------------------------------------------------------------------------

def _check_nan(out: np.ndarray, op: str) -> np.ndarray:
    if np.isnan(out).any():
        raise DomainError(f"{op} produced NaN")
    return out


def _unary(x, out, partial, op: str):
    _check_nan(out, op)
    if not isinstance(x, DiffValue):
        return out
    return DiffValue(out, x.tape, (x,), lambda g: (g * partial,))


def _binary(a, b, out, da, db, op: str):
    """``da``/``db`` are callables g -> grad (pre-unbroadcast) to defer work."""
    _check_nan(out, op)
    ad = isinstance(a, DiffValue)
    bd = isinstance(b, DiffValue)
    if not (ad or bd):
        return out
    tape = a.tape if ad else b.tape
    if ad and bd:
        if a.tape is not b.tape:
            raise TapeError("operands live on different tapes")
        sa, sb = a.value.shape, b.value.shape
        return DiffValue(out, tape, (a, b),
                         lambda g: (_unbroadcast(da(g), sa), _unbroadcast(db(g), sb)))
    if ad:
        sa = a.value.shape
        return DiffValue(out, tape, (a,), lambda g: (_unbroadcast(da(g), sa),))
    sb = b.value.shape
    return DiffValue(out, tape, (b,), lambda g: (_unbroadcast(db(g), sb),))


def _v(x) -> np.ndarray:
    return x.value if isinstance(x, DiffValue) else _arr(x)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    av, bv = _v(a), _v(b)
    return _binary(a, b, av + bv, lambda g: g, lambda g: g, "add")


def sub(a, b):
    av, bv = _v(a), _v(b)
    return _binary(a, b, av - bv, lambda g: g, lambda g: -g, "sub")


def mul(a, b):
    av, bv = _v(a), _v(b)
    return _binary(a, b, av * bv, lambda g: g * bv, lambda g: g * av, "mul")


def div(a, b):
    av, bv = _v(a), _v(b)
    if np.any(bv == 0):
        raise DomainError("division by zero")
    out = av / bv
    return _binary(a, b, out, lambda g: g / bv, lambda g: -g * out / bv, "div")


def neg(x):
    xv = _v(x)
    return _unary(x, -xv, -1.0, "neg")


def power(x, p: float):
    xv = _v(x)
    if p < 1 and np.any(xv <= 0):
        raise DomainError("fractional power of non-positive value")
    return _unary(x, xv ** p, p * xv ** (p - 1), "power")


def square(x):
    xv = _v(x)
    return _unary(x, xv * xv, 2.0 * xv, "square")


def sqrt(x):
    xv = _v(x)
    if np.any(xv < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(xv)
    with np.errstate(divide="ignore"):
        partial = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
    return _unary(x, out, partial, "sqrt")


def exp(x):
    out = np.exp(_v(x))
    return _unary(x, out, out, "exp")


def log(x):
    xv = _v(x)
    if np.any(xv <= 0):
        raise DomainError("log of non-positive value")
    return _unary(x, np.log(xv), 1.0 / xv, "log")


def tanh(x):
    out = np.tanh(_v(x))
    return _unary(x, out, 1.0 - out * out, "tanh")


def logistic(x):
    out = 0.5 * (1.0 + np.tanh(0.5 * _v(x)))
    return _unary(x, out, out * (1.0 - out), "logistic")


def atan2(y, x):
    yv, xv = _v(y), _v(x)
    r2 = xv * xv + yv * yv
    if np.any(r2 == 0):
        raise DomainError("atan2 of (0, 0)")
    return _binary(y, x, np.arctan2(yv, xv), lambda g: g * xv / r2, lambda g: -g * yv / r2, "atan2")


# ---------------------------------------------------------------------------
# gated (piecewise) operations
# ---------------------------------------------------------------------------

def _gate(node, outcome):
    if isinstance(node, DiffValue):
        node.tape.gates.append((node, outcome))
    return node


def maximum(a, b):
    av, bv = _v(a), _v(b)
    take = av >= bv
    out = np.where(take, av, bv)
    node = _binary(a, b, out, lambda g: np.where(take, g, 0.0), lambda g: np.where(take, 0.0, g), "maximum")
    return _gate(node, np.broadcast_to(take, out.shape))


def minimum(a, b):
    av, bv = _v(a), _v(b)
    take = av <= bv
    out = np.where(take, av, bv)
    node = _binary(a, b, out, lambda g: np.where(take, g, 0.0), lambda g: np.where(take, 0.0, g), "minimum")
    return _gate(node, np.broadcast_to(take, out.shape))


def relu(x):
    xv = _v(x)
    take = xv >= 0
    node = _unary(x, np.where(take, xv, 0.0), take.astype(np.float64), "relu")
    return _gate(node, take)


def abs(x):  # noqa: A001 - mirrors numpy naming
    xv = _v(x)
    take = xv >= 0
    node = _unary(x, np.where(take, xv, -xv), np.where(take, 1.0, -1.0), "abs")
    return _gate(node, take)


def where(cond, a, b):
    """Select ``a`` where ``cond`` holds else ``b``; ``cond`` is a constant mask."""
    cond = np.asarray(cond, dtype=bool)
    av, bv = _v(a), _v(b)
    out = np.where(cond, av, bv)
    node = _binary(a, b, out, lambda g: np.where(cond, g, 0.0), lambda g: np.where(cond, 0.0, g), "where")
    return _gate(node, np.broadcast_to(cond, out.shape))


def reduce_max(xs: Sequence):
    out = xs[0]
    for x in xs[1:]:
        out = maximum(out, x)
    return out


def reduce_min(xs: Sequence):
    out = xs[0]
    for x in xs[1:]:
        out = minimum(out, x)
    return out


def choose(index: np.ndarray, choices: Sequence):
    """Per-element selection ``choices[index[...]]`` (a recorded discrete choice).

    ``index`` must match the leading dims of the choices; trailing dims (e.g. RGB)
    broadcast.
    """
    index = np.asarray(index)
    vals = [_v(c) for c in choices]
    shape = np.broadcast_shapes(*(v.shape for v in vals))
    idx = index.reshape(index.shape + (1,) * (len(shape) - index.ndim))
    out = np.zeros(shape)
    for k, v in enumerate(vals):
        out = np.where(idx == k, v, out)
    tape = tape_of(*choices)
    if tape is None:
        return out
    tape.record_decision("choose", index)
    parents = [c for c in choices if isinstance(c, DiffValue)]
    slots = [k for k, c in enumerate(choices) if isinstance(c, DiffValue)]

    def vjp(g):
        return tuple(_unbroadcast(np.where(idx == k, g, 0.0), choices[k].value.shape) for k in slots)

    return DiffValue(out, tape, tuple(parents), vjp)


# ---------------------------------------------------------------------------
# array structure
# ---------------------------------------------------------------------------

def getitem(x, idx):
    xv = _v(x)
    out = xv[idx]
    if not isinstance(x, DiffValue):
        return out
    shape = xv.shape

    fancy = _needs_add_at(idx)

    def vjp(g):
        full = np.zeros(shape)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return DiffValue(np.array(out, dtype=np.float64), x.tape, (x,), vjp)


def _needs_add_at(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def stack(xs: Sequence, axis: int = 0):
    vals = [_v(x) for x in xs]
    out = np.stack(np.broadcast_arrays(*vals), axis=axis)
    tape = tape_of(*xs)
    if tape is None:
        return out
    parents, pos = [], []
    for k, x in enumerate(xs):
        if isinstance(x, DiffValue):
            parents.append(x)
            pos.append(k)

    def vjp(g):
        return tuple(_unbroadcast(np.take(g, k, axis=axis), xs[k].value.shape) for k in pos)

    return DiffValue(out, tape, tuple(parents), vjp)


def concatenate(xs: Sequence, axis: int = 0):
    vals = [np.atleast_1d(_v(x)) for x in xs]
    out = np.concatenate(vals, axis=axis)
    tape = tape_of(*xs)
    if tape is None:
        return out
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    parents, pos = [], []
    for k, x in enumerate(xs):
        if isinstance(x, DiffValue):
            parents.append(x)
            pos.append(k)

    def vjp(g):
        res = []
        for k in pos:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[k], bounds[k + 1])
            res.append(g[tuple(sl)].reshape(xs[k].value.shape))
        return tuple(res)

    return DiffValue(out, tape, tuple(parents), vjp)


def reshape(x, shape):
    xv = _v(x)
    out = xv.reshape(shape)
    if not isinstance(x, DiffValue):
        return out
    s = xv.shape
    return DiffValue(out, x.tape, (x,), lambda g: (g.reshape(s),))


def transpose(x, axes=None):
    xv = _v(x)
    out = np.transpose(xv, axes)
    if not isinstance(x, DiffValue):
        return out
    inv = None if axes is None else np.argsort(axes)
    return DiffValue(out, x.tape, (x,), lambda g: (np.transpose(g, inv),))


def sum(x, axis=None):  # noqa: A001
    xv = _v(x)
    out = np.asarray(xv.sum(axis=axis))
    if not isinstance(x, DiffValue):
        return out
    shape = xv.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return DiffValue(out, x.tape, (x,), vjp)


def mean(x, axis=None):
    xv = _v(x)
    n = xv.size if axis is None else np.prod([xv.shape[a] for a in np.atleast_1d(axis)])
    return div(sum(x, axis), float(n))


def matmul(a, b):
    av, bv = _v(a), _v(b)
    out = av @ bv

    if av.ndim > 2 or bv.ndim > 2:
        raise ValueError("matmul supports 1-d and 2-d operands only")

    def da(g):
        if av.ndim == 1:
            return bv @ g if bv.ndim == 2 else g * bv
        return np.outer(g, bv) if bv.ndim == 1 else g @ bv.T

    def db(g):
        if bv.ndim == 1:
            return g @ av if av.ndim == 2 else g * av
        return np.outer(av, g) if av.ndim == 1 else av.T @ g

    return _binary(a, b, out, da, db, "matmul")


def take_along(x, index: np.ndarray, axis: int):
    """``np.take_along_axis`` with a constant integer index array."""
    xv = _v(x)
    out = np.take_along_axis(xv, index, axis=axis)
    if not isinstance(x, DiffValue):
        return out
    shape = xv.shape

    def vjp(g):
        full = np.zeros(shape)
        _add_along(full, index, g, axis)
        return (full,)

    return DiffValue(out, x.tape, (x,), vjp)


def _add_along(full, index, g, axis):
    idx = list(np.indices(index.shape, sparse=True))
    idx[axis] = index
    np.add.at(full, tuple(idx), g)


def scatter(base: np.ndarray, idx, values):
    """Copy of constant ``base`` with ``base[idx] = values`` (idx hits unique cells)."""
    out = np.array(base, dtype=np.float64, copy=True)
    out[idx] = _v(values)
    if not isinstance(values, DiffValue):
        return out
    vshape = values.value.shape
    return DiffValue(out, values.tape, (values,), lambda g: (g[idx].reshape(vshape),))


def linear(x, forward: Callable[[np.ndarray], np.ndarray], adjoint: Callable[[np.ndarray], np.ndarray]):
    """Apply a linear map given its forward action and adjoint action."""
    out = forward(_v(x))
    if not isinstance(x, DiffValue):
        return out
    return DiffValue(out, x.tape, (x,), lambda g: (adjoint(g),))


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class GradcheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    kink_adjacent: np.ndarray
    failed: np.ndarray
    tol: float

    @property
    def checked(self) -> int:
        return int((~self.kink_adjacent).sum())

    @property
    def pass_fraction(self) -> float:
        if self.checked == 0:
            return 1.0
        return 1.0 - float(self.failed.sum()) / self.checked

    def __str__(self) -> str:
        return (f"gradcheck: {self.checked} checked, {int(self.kink_adjacent.sum())} kink-adjacent, "
                f"{int(self.failed.sum())} failed (tol {self.tol:g}), pass {self.pass_fraction:.1%}")


def _signature(tape: Tape, adj: dict | None):
    gates = []
    for node, outcome in tape.gates:
        if adj is None:
            gates.append((outcome, None))
        else:
            g = adj.get(node.index)
            mask = np.zeros(outcome.shape, bool) if g is None else np.broadcast_to(g != 0, outcome.shape)
            gates.append((outcome, mask))
    return gates, tape.decisions


def _same_branches(base, probe) -> bool:
    (bg, bd), (pg, pd) = base, probe
    if len(bg) != len(pg) or len(bd) != len(pd):
        return False
    for (bo, mask), (po, _) in zip(bg, pg):
        if bo.shape != po.shape:
            return False
        if not np.array_equal(bo[mask], po[mask]):
            return False
    for (bn, bv), (pn, pv) in zip(bd, pd):
        if bn != pn or bv.shape != pv.shape or not np.array_equal(bv, pv):
            return False
    return True


def gradcheck(f: Callable[[DiffValue], DiffValue], point, h: float = 1e-4, tol: float = 1e-3) -> GradcheckReport:
    """Compare tape gradients of scalar ``f`` with central differences.

    A coordinate is kink-adjacent when either probe ``point +- h e_i`` changes a
    branch outcome that influences the result (a gate with nonzero adjoint) or
    any recorded decision; such coordinates are reported but not judged.
    """
    x0 = np.array(point, dtype=np.float64).ravel()
    tape = Tape()
    leaf = tape.variable(x0)
    root = f(leaf)
    adj = tape.backward(root)
    g = np.broadcast_to(adj.get(leaf.index, 0.0), x0.shape).copy()
    base = _signature(tape, adj)

    numeric = np.zeros_like(x0)
    kink = np.zeros(x0.shape, bool)
    for i in range(x0.size):
        vals = []
        for sign in (1.0, -1.0):
            xp = x0.copy()
            xp[i] += sign * h
            tp = Tape()
            out = f(tp.variable(xp))
            vals.append(float(_v(out)))
            if not _same_branches(base, _signature(tp, None)):
                kink[i] = True
        numeric[i] = (vals[0] - vals[1]) / (2 * h)
    rel = np.abs(numeric - g) / np.maximum(1.0, np.abs(g))
    failed = (rel > tol) & ~kink
    return GradcheckReport(g, numeric, rel, kink, failed, tol)
