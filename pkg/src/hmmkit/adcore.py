"""Array-level automatic differentiation.

Two cooperating pieces:

* :class:`Var` records operations on a per-evaluation tape and replays them
  backwards (reverse mode), giving gradients at a small constant multiple of
  the cost of one function evaluation.
* :class:`Dual` carries a batch of tangent directions alongside a value
  (forward mode).  Jacobians of vector-valued maps use it directly.

Because every backward rule is itself written with the public operations of
this module, a tape whose values are :class:`Dual` objects differentiates the
gradient once more.  Seeding the input with the identity matrix as tangents
yields all Hessian columns in one forward-over-reverse sweep.

Functions to be differentiated must be written with the operations exported
here (``exp``, ``log``, ``logsumexp``, ...) and the arithmetic operators.  The
same code then runs on plain ``numpy`` arrays, on :class:`Var` and on
:class:`Dual` inputs.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

__all__ = [
    "Dual", "Var", "DiffFunction", "EvaluationError", "NonDifferentiableError",
    "OpCounter", "count_ops", "value", "gradient", "value_and_gradient",
    "hessian", "value_grad_hess", "jacobian",
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "sqrt",
    "sum", "logsumexp", "getitem", "scatter", "reshape", "transpose",
    "concatenate", "solve",
]


class EvaluationError(ArithmeticError):
    """A function evaluation produced a non-finite value."""


class NonDifferentiableError(ArithmeticError):
    """An elementary operation was evaluated where it has no derivative."""


# ---------------------------------------------------------------------------
# operation counting
# ---------------------------------------------------------------------------

@dataclass
class OpCounter:
    ops: int = 0


_counter: contextvars.ContextVar[OpCounter | None] = contextvars.ContextVar(
    "hmmkit_op_counter", default=None)


@contextlib.contextmanager
def count_ops() -> Iterator[OpCounter]:
    """Count elementary operations executed inside the block.

    Every call of a public operation counts once, whatever the input type, so
    the count of a reverse sweep includes the operations of the backward
    rules.
    """
    counter = OpCounter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


def _tick():
    c = _counter.get()
    if c is not None:
        c.ops += 1


# ---------------------------------------------------------------------------
# forward-mode values
# ---------------------------------------------------------------------------

class Dual:
    """Value with a batch of ``k`` tangents; ``tan.shape == (k,) + val.shape``."""

    __slots__ = ("val", "tan")
    __array_ufunc__ = None

    def __init__(self, val, tan):
        self.val = np.asarray(val, dtype=float)
        self.tan = np.asarray(tan, dtype=float)

    @property
    def k(self):
        return self.tan.shape[0]

    @property
    def shape(self):
        return self.val.shape

    @property
    def ndim(self):
        return self.val.ndim

    def __repr__(self):
        return f"Dual(val={self.val!r}, k={self.k})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    @property
    def T(self):
        return transpose(self)


def _tan(x, ndim, k):
    """Tangent of ``x`` aligned for broadcasting against a rank-``ndim`` value."""
    if not isinstance(x, Dual):
        return None
    t = x.tan
    pad = ndim - x.val.ndim
    if pad:
        t = t.reshape((k,) + (1,) * pad + x.val.shape)
    return t


def _val(x):
    return x.val if isinstance(x, Dual) else x


def _k(*xs):
    for x in xs:
        if isinstance(x, Dual):
            return x.k
    return None


def _full_tan(t, k, shape):
    full = (k,) + shape
    return t if t.shape == full else np.broadcast_to(t, full)


# raw kernels: ndarray or Dual in, ndarray or Dual out, never counted

def _r_add(a, b, sign=1.0):
    av, bv = _val(a), _val(b)
    v = av + bv if sign > 0 else av - bv
    k = _k(a, b)
    if k is None:
        return v
    nd = np.ndim(v)
    ta, tb = _tan(a, nd, k), _tan(b, nd, k)
    if ta is None:
        t = tb if sign > 0 else -tb
    elif tb is None:
        t = ta
    else:
        t = ta + tb if sign > 0 else ta - tb
    return Dual(v, _full_tan(t, k, np.shape(v)))


def _r_mul(a, b):
    av, bv = _val(a), _val(b)
    v = av * bv
    k = _k(a, b)
    if k is None:
        return v
    nd = np.ndim(v)
    ta, tb = _tan(a, nd, k), _tan(b, nd, k)
    if ta is None:
        t = av * tb
    elif tb is None:
        t = ta * bv
    else:
        t = ta * bv + av * tb
    return Dual(v, _full_tan(t, k, np.shape(v)))


def _r_div(a, b):
    av, bv = _val(a), _val(b)
    v = av / bv
    k = _k(a, b)
    if k is None:
        return v
    nd = np.ndim(v)
    ta, tb = _tan(a, nd, k), _tan(b, nd, k)
    if ta is None:
        t = -(v / bv) * tb
    elif tb is None:
        t = ta / bv
    else:
        t = (ta - v * tb) / bv
    return Dual(v, _full_tan(t, k, np.shape(v)))


def _r_unary(x, f, df):
    """Apply ``f`` elementwise; ``df(xv, fv)`` is the derivative."""
    if isinstance(x, Dual):
        v = f(x.val)
        return Dual(v, x.tan * df(x.val, v))
    return f(x)


def _r_sum(x, axis, keepdims):
    if isinstance(x, Dual):
        v = np.sum(x.val, axis=axis, keepdims=keepdims)
        if axis is None:
            ax = tuple(range(1, x.tan.ndim))
        else:
            ax = tuple(a % x.val.ndim + 1 for a in np.atleast_1d(axis))
        return Dual(v, np.sum(x.tan, axis=ax, keepdims=keepdims))
    return np.sum(x, axis=axis, keepdims=keepdims)


def _r_logsumexp(x, axis, keepdims):
    v = _val(x)
    # pairwise logaddexp is exact for -inf entries and needs no max shift
    if axis is None:
        out = np.logaddexp.reduce(v.reshape(-1))
        if keepdims:
            out = np.reshape(out, (1,) * v.ndim)
    else:
        out = np.logaddexp.reduce(v, axis=axis, keepdims=keepdims)
    if not isinstance(x, Dual):
        return out
    kept = out if keepdims else np.reshape(out, _kept_shape(v.shape, axis))
    w = np.exp(v - kept)
    ax = tuple(range(1, x.tan.ndim)) if axis is None else axis % v.ndim + 1
    return Dual(out, np.sum(x.tan * w, axis=ax, keepdims=keepdims))


def _norm_index(idx):
    return idx if isinstance(idx, tuple) else (idx,)


def _r_getitem(x, idx):
    if isinstance(x, Dual):
        return Dual(x.val[idx], x.tan[(slice(None),) + _norm_index(idx)])
    return x[idx]


def _r_scatter(x, idx, shape):
    if isinstance(x, Dual):
        v = np.zeros(shape)
        v[idx] = x.val
        t = np.zeros((x.k,) + tuple(shape))
        t[(slice(None),) + _norm_index(idx)] = x.tan
        return Dual(v, t)
    out = np.zeros(shape)
    out[idx] = x
    return out


def _r_reshape(x, shape):
    if isinstance(x, Dual):
        v = x.val.reshape(shape)
        return Dual(v, x.tan.reshape((x.k,) + v.shape))
    if isinstance(x, np.ndarray):
        return x.reshape(shape)
    return np.reshape(x, shape)


def _r_transpose(x):
    if isinstance(x, Dual):
        return Dual(x.val.T, np.swapaxes(x.tan, 1, 2))
    return np.transpose(x)


def _r_concatenate(xs):
    v = np.concatenate([np.atleast_1d(_val(x)) for x in xs])
    k = _k(*xs)
    if k is None:
        return v
    ts = [x.tan.reshape(k, -1) if isinstance(x, Dual)
          else np.zeros((k, np.size(x))) for x in xs]
    return Dual(v, np.concatenate(ts, axis=1))


def _r_solve(a, b):
    av, bv = _val(a), _val(b)
    v = np.linalg.solve(av, bv)
    k = _k(a, b)
    if k is None:
        return v
    # d(A^-1 b) = A^-1 (db - dA x)
    rhs = np.zeros((k,) + v.shape)
    if isinstance(b, Dual):
        rhs = rhs + b.tan
    if isinstance(a, Dual):
        rhs = rhs - a.tan @ v
    return Dual(v, np.linalg.solve(av, rhs.T).T)


# ---------------------------------------------------------------------------
# reverse-mode tape
# ---------------------------------------------------------------------------

class _Tape:
    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []


class Var:
    """Node of a reverse-mode tape.

    ``value`` is an ndarray, or a :class:`Dual` when the tape is being
    differentiated a second time.
    """

    __slots__ = ("value", "shape", "tape", "index", "parents", "vjp")
    __array_ufunc__ = None

    def __init__(self, value, tape=None, parents=(), vjp=None):
        if not isinstance(value, Dual):
            value = np.asarray(value, dtype=float)
        self.value = value
        self.shape = value.shape
        if tape is None:
            tape = _Tape()
        self.tape = tape
        self.index = len(tape.nodes)
        self.parents = parents
        self.vjp = vjp
        tape.nodes.append(self)

    @property
    def ndim(self):
        return len(self.shape)

    def __repr__(self):
        return f"Var(shape={self.shape}, index={self.index})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    @property
    def T(self):
        return transpose(self)


class _IndexAdd:
    """Sparse adjoint contribution: add ``g`` into ``parent_adjoint[idx]``."""

    __slots__ = ("idx", "g")

    def __init__(self, idx, g):
        self.idx = idx
        self.g = g


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _zeros_like_value(v):
    if isinstance(v, Dual):
        return Dual(np.zeros(v.val.shape), np.zeros(v.tan.shape))
    return np.zeros(np.shape(v))


def _index_accumulate(acc, owned, parent_value, contrib):
    if acc is None:
        acc = _zeros_like_value(parent_value)
    elif not owned:
        acc = (Dual(acc.val.copy(), np.array(acc.tan)) if isinstance(acc, Dual)
               else np.array(acc, dtype=float))
    idx, g = contrib.idx, contrib.g
    if isinstance(acc, Dual):
        acc.val[idx] += _val(g)
        if isinstance(g, Dual):
            acc.tan[(slice(None),) + _norm_index(idx)] += g.tan
    else:
        acc[idx] += g
    return acc


def _backward(out: Var, seed):
    """Propagate ``seed`` from ``out`` to every node on its tape."""
    nodes = out.tape.nodes
    adj = [None] * len(nodes)
    owned = [False] * len(nodes)
    adj[out.index] = seed
    for node in reversed(nodes[: out.index + 1]):
        g = adj[node.index]
        if g is None or node.vjp is None:
            continue
        for parent, contrib in zip(node.parents, node.vjp(g)):
            if not isinstance(parent, Var) or contrib is None:
                continue
            i = parent.index
            if isinstance(contrib, _IndexAdd):
                adj[i] = _index_accumulate(adj[i], owned[i], parent.value, contrib)
                owned[i] = True
            elif adj[i] is None:
                adj[i] = contrib
            else:
                adj[i] = add(adj[i], contrib)
                owned[i] = False
    return adj


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    gshape = g.shape
    if gshape == shape:
        return g
    lead = len(gshape) - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and gshape[lead + i] != 1)
    if axes:
        g = sum(g, axis=axes, keepdims=True)
    return reshape(g, tuple(shape))


def _shape(x):
    if isinstance(x, (Var, Dual, np.ndarray)):
        return x.shape
    return np.shape(x)


def _raw(x):
    return x.value if isinstance(x, Var) else x


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def add(a, b):
    _tick()
    tape = _tape_of(a, b)
    v = _r_add(_raw(a), _raw(b))
    if tape is None:
        return v
    sa, sb = _shape(a), _shape(b)
    return Var(v, tape, (a, b),
               lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    _tick()
    tape = _tape_of(a, b)
    v = _r_add(_raw(a), _raw(b), sign=-1.0)
    if tape is None:
        return v
    sa, sb = _shape(a), _shape(b)
    return Var(v, tape, (a, b),
               lambda g: (_unbroadcast(g, sa), _unbroadcast(neg(g), sb)))


def mul(a, b):
    _tick()
    tape = _tape_of(a, b)
    ra, rb = _raw(a), _raw(b)
    v = _r_mul(ra, rb)
    if tape is None:
        return v
    sa, sb = _shape(a), _shape(b)

    def vjp(g):
        ga = _unbroadcast(mul(g, rb), sa) if isinstance(a, Var) else None
        gb = _unbroadcast(mul(g, ra), sb) if isinstance(b, Var) else None
        return ga, gb
    return Var(v, tape, (a, b), vjp)


def div(a, b):
    _tick()
    tape = _tape_of(a, b)
    ra, rb = _raw(a), _raw(b)
    if isinstance(b, (Var, Dual)) and np.any(_val(rb) == 0):
        raise NonDifferentiableError("division by zero")
    v = _r_div(ra, rb)
    if tape is None:
        return v
    sa, sb = _shape(a), _shape(b)

    def vjp(g):
        ga = g_over = div(g, rb)
        gb = _unbroadcast(neg(mul(g_over, v)), sb) if isinstance(b, Var) else None
        return (_unbroadcast(ga, sa) if isinstance(a, Var) else None), gb
    return Var(v, tape, (a, b), vjp)


def neg(x):
    _tick()
    r = _raw(x)
    v = _r_mul(r, -1.0) if isinstance(r, Dual) else -r
    if not isinstance(x, Var):
        return v
    return Var(v, x.tape, (x,), lambda g: (neg(g),))


def exp(x):
    _tick()
    v = _r_unary(_raw(x), np.exp, lambda xv, fv: fv)
    if not isinstance(x, Var):
        return v
    return Var(v, x.tape, (x,), lambda g: (mul(g, v),))


def log(x):
    _tick()
    r = _raw(x)
    if isinstance(r, Dual) or isinstance(x, Var):
        if np.any(_val(r) <= 0):
            raise NonDifferentiableError("log of a non-positive value")
    v = _r_unary(r, np.log, lambda xv, fv: 1.0 / xv)
    if not isinstance(x, Var):
        return v
    return Var(v, x.tape, (x,), lambda g: (div(g, r),))


def power(x, p):
    """``x ** p`` for a constant real exponent ``p``."""
    _tick()
    p = float(p)
    r = _raw(x)
    if isinstance(r, Dual) or isinstance(x, Var):
        xv = _val(r)
        if (p < 1 and np.any(xv == 0)) or (not p.is_integer() and np.any(xv < 0)):
            raise NonDifferentiableError(f"x**{p} at an invalid point")
    v = _r_unary(r, lambda a: np.power(a, p), lambda a, fa: p * np.power(a, p - 1))
    if not isinstance(x, Var):
        return v
    if p == 2.0:
        return Var(v, x.tape, (x,), lambda g: (mul(g, mul(r, 2.0)),))
    return Var(v, x.tape, (x,), lambda g: (mul(g, mul(power(r, p - 1.0), p)),))


def sqrt(x):
    _tick()
    r = _raw(x)
    if (isinstance(r, Dual) or isinstance(x, Var)) and np.any(_val(r) <= 0):
        raise NonDifferentiableError("sqrt at a non-positive value")
    v = _r_unary(r, np.sqrt, lambda a, fa: 0.5 / fa)
    if not isinstance(x, Var):
        return v
    return Var(v, x.tape, (x,), lambda g: (div(mul(g, 0.5), v),))


def sum(x, axis=None, keepdims=False):
    _tick()
    v = _r_sum(_raw(x), axis, keepdims)
    if not isinstance(x, Var):
        return v
    shape = x.shape
    kept = _kept_shape(shape, axis)

    def vjp(g):
        return (add(reshape(g, kept), np.zeros(shape)),)
    return Var(v, x.tape, (x,), vjp)


def _kept_shape(shape, axis):
    if axis is None:
        return (1,) * len(shape)
    axes = {a % len(shape) for a in np.atleast_1d(axis)}
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def logsumexp(x, axis=None, keepdims=False):
    """``log(sum(exp(x)))`` as one fused, overflow-free operation."""
    _tick()
    r = _raw(x)
    v = _r_logsumexp(r, axis, keepdims)
    if not isinstance(x, Var):
        return v
    kept = v.shape if keepdims else _kept_shape(x.shape, axis)

    def vjp(g):
        w = exp(sub(r, reshape(v, kept)))
        return (mul(reshape(g, kept), w),)
    return Var(v, x.tape, (x,), vjp)


def getitem(x, idx):
    _tick()
    v = _r_getitem(_raw(x), idx)
    if not isinstance(x, Var):
        return v
    return Var(v, x.tape, (x,), lambda g: (_IndexAdd(idx, g),))


def scatter(x, idx, shape):
    """Zeros of ``shape`` with ``x`` written at ``idx``."""
    _tick()
    shape = tuple(shape)
    v = _r_scatter(_raw(x), idx, shape)
    if not isinstance(x, Var):
        return v
    return Var(v, x.tape, (x,), lambda g: (getitem(g, idx),))


def reshape(x, shape):
    if not isinstance(shape, tuple):
        shape = tuple(np.atleast_1d(shape))
    if -1 not in shape and _shape(x) == shape:
        return x
    _tick()
    v = _r_reshape(_raw(x), shape)
    if not isinstance(x, Var):
        return v
    old = x.shape
    return Var(v, x.tape, (x,), lambda g: (reshape(g, old),))


def transpose(x):
    _tick()
    v = _r_transpose(_raw(x))
    if not isinstance(x, Var):
        return v
    return Var(v, x.tape, (x,), lambda g: (transpose(g),))


def concatenate(xs):
    """Concatenate 1-D pieces (scalars count as length one)."""
    _tick()
    xs = list(xs)
    tape = _tape_of(*xs)
    v = _r_concatenate([_raw(x) for x in xs])
    if tape is None:
        return v
    sizes = [int(np.prod(_shape(x))) for x in xs]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            reshape(getitem(g, slice(int(offsets[i]), int(offsets[i + 1]))), _shape(x))
            if isinstance(x, Var) else None
            for i, x in enumerate(xs))
    return Var(v, tape, tuple(xs), vjp)


def solve(a, b):
    """Solve ``a @ x = b`` for a square matrix ``a`` and a vector ``b``."""
    _tick()
    tape = _tape_of(a, b)
    ra, rb = _raw(a), _raw(b)
    v = _r_solve(ra, rb)
    if tape is None:
        return v

    def vjp(g):
        gb = solve(transpose(ra), g)
        ga = neg(mul(reshape(gb, (-1, 1)), reshape(v, (1, -1)))) if isinstance(a, Var) else None
        return ga, (gb if isinstance(b, Var) else None)
    return Var(v, tape, (a, b), vjp)


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiffFunction:
    """A scalar function of a real vector built from this module's operations."""

    fn: Callable
    dim: int

    def __call__(self, x):
        return self.fn(x)


def _prepare(f, x):
    x = np.array(x, dtype=float).reshape(-1)
    dim = getattr(f, "dim", None)
    if dim is not None and x.size != dim:
        raise ValueError(f"expected input of length {dim}, got {x.size}")
    return x


def _check_finite(v, what="function value"):
    if not np.all(np.isfinite(v)):
        raise EvaluationError(f"non-finite {what}: {v!r}")


def value(f, x) -> float:
    """Plain evaluation of ``f`` at ``x``."""
    x = _prepare(f, x)
    y = np.asarray(_val(_raw(f(x))), dtype=float)
    _check_finite(y)
    return float(y)


def value_and_gradient(f, x):
    x = _prepare(f, x)
    xv = Var(x)
    y = f(xv)
    if not isinstance(y, Var):
        v = float(np.asarray(y))
        _check_finite(v)
        return v, np.zeros_like(x)
    v = float(y.value)
    _check_finite(v)
    adj = _backward(y, np.ones(()))
    g = adj[xv.index]
    g = np.zeros_like(x) if g is None else np.asarray(g, dtype=float).reshape(-1)
    _check_finite(g, "gradient")
    return v, g


def gradient(f, x) -> np.ndarray:
    """Reverse-mode gradient of scalar ``f`` at ``x``."""
    return value_and_gradient(f, x)[1]


def value_grad_hess(f, x):
    """Value, gradient and symmetrised Hessian from one forward-over-reverse sweep."""
    x = _prepare(f, x)
    n = x.size
    xv = Var(Dual(x, np.eye(n)))
    y = f(xv)
    if not isinstance(y, Var):
        v = float(np.asarray(_val(_raw(y))))
        _check_finite(v)
        return v, np.zeros(n), np.zeros((n, n))
    v = float(y.value.val)
    _check_finite(v)
    adj = _backward(y, Dual(np.ones(()), np.zeros((n,))))
    a = adj[xv.index]
    if a is None:
        return v, np.zeros(n), np.zeros((n, n))
    g = np.array(a.val, dtype=float).reshape(-1)
    h = np.array(a.tan, dtype=float).reshape(n, n)
    h = 0.5 * (h + h.T)
    _check_finite(g, "gradient")
    _check_finite(h, "Hessian")
    return v, g, h


def hessian(f, x) -> np.ndarray:
    return value_grad_hess(f, x)[2]


def jacobian(f, x):
    """Forward-mode Jacobian of an array-valued ``f``; shape ``out.shape + (n,)``."""
    x = _prepare(f, x)
    n = x.size
    y = f(Dual(x, np.eye(n)))
    if not isinstance(y, Dual):
        y = np.asarray(y, dtype=float)
        _check_finite(y)
        return np.zeros(y.shape + (n,))
    _check_finite(y.val)
    j = np.moveaxis(y.tan, 0, -1)
    _check_finite(j, "Jacobian")
    return np.array(j)
