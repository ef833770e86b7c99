"""Reverse-mode automatic differentiation on numpy arrays.

A small tape: every op returns either a plain ndarray (when no argument is
tracked) or a `Var` node holding the forward value plus, per tracked input, a
closure mapping the output cotangent to that input's cotangent. Model code is
written once against these ops and runs in two modes: plain numpy for
prediction, tracked for training gradients.

Matrix-op adjoints follow the standard implicit-function derivations. The
Cholesky rule is the level-3 reverse-mode identity
    P = Phi(L^T Lbar),  Abar = 0.5 * (L^-T (P + P^T) L^-1),
with Phi taking the lower triangle and halving the diagonal. The output is
symmetrized, so an objective A -> logdet(A) computed through the factor gets
gradient A^-1 on symmetric PSD input; all Gram matrices built upstream are
symmetric constructions, for which this convention matches central
differences on the underlying parameters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics


class Var:
    """Node in the backward graph: forward value + per-input grad closures."""

    __slots__ = ("value", "parents")

    # make ndarray <op> Var defer to the reflected Var operators instead of
    # broadcasting elementwise into an object array
    __array_ufunc__ = None
    __array_priority__ = 1000

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents  # tuple of (Var, gradfn)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, n_parents={len(self.parents)})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return power(self, p)
    def __getitem__(self, idx): return getitem(self, idx)


def leaf(value) -> Var:
    return Var(value)


def is_var(x) -> bool:
    return isinstance(x, Var)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def detach(x):
    """Forward value with the graph cut (stop-gradient)."""
    return value_of(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a cotangent g down to `shape` by summing broadcast axes."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, fwd, grad_a, grad_b):
    av, bv = value_of(a), value_of(b)
    out = fwd(av, bv)
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g, av=av, bv=bv: _unbroadcast(grad_a(g, av, bv), av.shape)))
    if isinstance(b, Var):
        parents.append((b, lambda g, av=av, bv=bv: _unbroadcast(grad_b(g, av, bv), bv.shape)))
    if not parents:
        return out
    return Var(out, tuple(parents))


def add(a, b):
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binary(a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def _unary(x, fwd, grad):
    xv = value_of(x)
    out = fwd(xv)
    if not isinstance(x, Var):
        return out
    return Var(out, ((x, lambda g, xv=xv, out=out: grad(g, xv, out)),))


def neg(x): return _unary(x, lambda v: -v, lambda g, v, o: -g)
def exp(x): return _unary(x, np.exp, lambda g, v, o: g * o)
def log(x): return _unary(x, np.log, lambda g, v, o: g / v)
def sqrt(x): return _unary(x, np.sqrt, lambda g, v, o: g * 0.5 / o)
def square(x): return _unary(x, np.square, lambda g, v, o: g * 2.0 * v)
def sin(x): return _unary(x, np.sin, lambda g, v, o: g * np.cos(v))
def cos(x): return _unary(x, np.cos, lambda g, v, o: -g * np.sin(v))
def absolute(x): return _unary(x, np.abs, lambda g, v, o: g * np.sign(v))


def power(x, p):
    p = float(p)
    return _unary(x, lambda v: v ** p, lambda g, v, o: g * p * v ** (p - 1.0))


def clip(x, lo, hi):
    """Clamp to [lo, hi]; gradient passes through strictly interior entries."""
    xv = value_of(x)
    out = np.clip(xv, lo, hi)
    if not isinstance(x, Var):
        return out
    mask = ((xv > lo) if lo is not None else True) & ((xv < hi) if hi is not None else True)
    return Var(out, ((x, lambda g, mask=mask: g * mask),))


def clip_lower(x, lo):
    return clip(x, lo, None)


def sum_(x, axis=None, keepdims=False):
    xv = value_of(x)
    out = np.sum(xv, axis=axis, keepdims=keepdims)
    if not isinstance(x, Var):
        return out

    def grad(g, shape=xv.shape):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return Var(out, ((x, grad),))


def mean_(x, axis=None, keepdims=False):
    xv = value_of(x)
    n = xv.size if axis is None else xv.shape[axis]
    return div(sum_(x, axis=axis, keepdims=keepdims), float(n))


def reshape(x, shape):
    xv = value_of(x)
    out = xv.reshape(shape)
    if not isinstance(x, Var):
        return out
    return Var(out, ((x, lambda g, s=xv.shape: g.reshape(s)),))


def transpose(x, axes=None):
    xv = value_of(x)
    out = np.transpose(xv, axes)
    if not isinstance(x, Var):
        return out
    inv = None if axes is None else tuple(np.argsort(axes))
    return Var(out, ((x, lambda g, inv=inv: np.transpose(g, inv)),))


def getitem(x, idx):
    xv = value_of(x)
    out = xv[idx]
    if not isinstance(x, Var):
        return out

    def grad(g, shape=xv.shape, idx=idx):
        buf = np.zeros(shape)
        np.add.at(buf, idx, g)
        return buf

    return Var(out, ((x, grad),))


def concat(parts, axis=0):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    tracked = [(i, p) for i, p in enumerate(parts) if isinstance(p, Var)]
    if not tracked:
        return out
    offsets = np.cumsum([0] + [v.shape[axis] for v in vals])
    parents = []
    for i, p in tracked:
        def grad(g, lo=offsets[i], hi=offsets[i + 1], axis=axis):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]
        parents.append((p, grad))
    return Var(out, tuple(parents))


def _matmul2(a, b):
    return _binary(a, b, lambda x, y: x @ y,
                   lambda g, x, y: g @ y.T,
                   lambda g, x, y: x.T @ g)


def matmul(a, b):
    """Matrix product; 1-D operands are promoted and the result squeezed back."""
    a_nd, b_nd = value_of(a).ndim, value_of(b).ndim
    if a_nd == 2 and b_nd == 2:
        return _matmul2(a, b)
    aa = reshape(a, (1, -1)) if a_nd == 1 else a
    bb = reshape(b, (-1, 1)) if b_nd == 1 else b
    out = _matmul2(aa, bb)
    if a_nd == 1 and b_nd == 1:
        return reshape(out, ())
    if a_nd == 1:
        return reshape(out, (value_of(out).shape[1],))
    if b_nd == 1:
        return reshape(out, (value_of(out).shape[0],))
    return out


def dot(a, b):
    return matmul(a, b)


def diag_part(x):
    xv = value_of(x)
    out = np.diagonal(xv).copy()
    if not isinstance(x, Var):
        return out
    return Var(out, ((x, lambda g, n=xv.shape[0]: np.diag(g)),))


def diag_matrix(v):
    vv = value_of(v)
    out = np.diag(vv)
    if not isinstance(v, Var):
        return out
    return Var(out, ((v, lambda g: np.diagonal(g).copy()),))


def tril(x):
    mask = np.tril(np.ones(value_of(x).shape))
    return mul(x, mask)


def _phi(m: np.ndarray) -> np.ndarray:
    out = np.tril(m)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def cholesky(a):
    """Lower Cholesky factor with the shared jitter policy; tracked adjoint.

    Jitter is a constant shift by a multiple of the identity, so it does not
    alter the gradient with respect to the input matrix.
    """
    av = value_of(a)
    L, _ = numerics.cholesky(av)
    if not isinstance(a, Var):
        return L

    def grad(g, L=L):
        P = _phi(L.T @ g)
        U = numerics.tri_solve(L, P + P.T, trans=True)
        S = numerics.tri_solve(L, U.T, trans=True).T
        # S is symmetric up to roundoff; 0.5 * sym(S) is the symmetrized adjoint
        return 0.25 * (S + S.T)

    return Var(L, ((a, grad),))


def tri_solve(L, b, trans=False):
    """Solve L x = b or L^T x = b for lower-triangular L, with adjoints."""
    Lv, bv = value_of(L), value_of(b)
    out = numerics.tri_solve(Lv, bv, trans=trans)
    if not isinstance(L, Var) and not isinstance(b, Var):
        return out
    x2 = out if out.ndim == 2 else out[:, None]
    parents = []
    if trans:
        # x = L^-T b:  bbar = L^-1 xbar,  Lbar = -tril(x bbar^T)
        def grad_b(g, Lv=Lv):
            return numerics.tri_solve(Lv, g, trans=False)

        def grad_L(g, Lv=Lv, x2=x2):
            g2 = g if g.ndim == 2 else g[:, None]
            bbar = numerics.tri_solve(Lv, g2, trans=False)
            return -np.tril(x2 @ bbar.T)
    else:
        # x = L^-1 b:  bbar = L^-T xbar,  Lbar = -tril(bbar x^T)
        def grad_b(g, Lv=Lv):
            return numerics.tri_solve(Lv, g, trans=True)

        def grad_L(g, Lv=Lv, x2=x2):
            g2 = g if g.ndim == 2 else g[:, None]
            bbar = numerics.tri_solve(Lv, g2, trans=True)
            return -np.tril(bbar @ x2.T)

    if isinstance(b, Var):
        parents.append((b, grad_b))
    if isinstance(L, Var):
        parents.append((L, grad_L))
    return Var(out, tuple(parents))


def _toposort(root: Var) -> list[Var]:
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
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Var) -> dict[int, np.ndarray]:
    """Cotangents of a scalar root with respect to every node, keyed by id."""
    if not isinstance(root, Var):
        raise TypeError("backward needs a tracked Var")
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar objective, got shape {root.value.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(_toposort(root)):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, gradfn in node.parents:
            contrib = gradfn(g)
            acc = grads.get(id(parent))
            grads[id(parent)] = contrib if acc is None else acc + contrib
    return grads


def gradient(fn, params: dict[str, np.ndarray], trainable=None):
    """Value and gradients of a scalar objective over named parameter slots.

    `fn` receives a dict mapping each slot name to a tracked Var (trainable)
    or a plain array (fixed). Slots the objective never touches get zero
    gradients of the right shape.
    """
    names = list(params) if trainable is None else [n for n in params if n in trainable]
    leaves = {}
    handed = {}
    for name, val in params.items():
        if name in names:
            v = leaf(val)
            leaves[name] = v
            handed[name] = v
        else:
            handed[name] = np.asarray(val, dtype=np.float64)
    out = fn(handed)
    grads = backward(out)
    return float(out.value), {
        name: grads.get(id(v), np.zeros_like(v.value)) for name, v in leaves.items()
    }


@dataclass
class GradientReport:
    slot: str
    shape: tuple
    n_coords: int
    max_rel_err: float
    worst_coord: tuple
    analytic: float
    numeric: float
    passed: bool

    def line(self) -> str:
        status = "ok  " if self.passed else "FAIL"
        return (f"{status} {self.slot:<28s} shape={str(self.shape):<12s} "
                f"max_rel_err={self.max_rel_err:.3e} "
                f"(analytic={self.analytic:+.6e}, numeric={self.numeric:+.6e})")


def gradcheck(fn, params: dict[str, np.ndarray], trainable=None,
              h: float = 1e-5, rel_tol: float = 1e-4) -> list[GradientReport]:
    """Central-difference check of every coordinate of every trainable slot.

    The objective must be deterministic: any Monte Carlo draws have to be
    frozen inside `fn` before calling this.
    """
    names = list(params) if trainable is None else [n for n in params if n in trainable]
    _, grads = gradient(fn, params, trainable=names)

    def eval_at(p):
        out = fn({k: np.asarray(v, dtype=np.float64) for k, v in p.items()})
        return float(value_of(out))

    reports = []
    for name in names:
        base = np.array(params[name], dtype=np.float64)
        g = grads[name]
        num = np.zeros_like(base)
        it = np.nditer(base, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            pert = dict(params)
            bumped = base.copy()
            bumped[idx] = base[idx] + h
            pert[name] = bumped
            f_plus = eval_at(pert)
            bumped = base.copy()
            bumped[idx] = base[idx] - h
            pert[name] = bumped
            f_minus = eval_at(pert)
            num[idx] = (f_plus - f_minus) / (2.0 * h)
            it.iternext()
        denom = np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-8)
        rel = np.abs(g - num) / denom
        worst = np.unravel_index(np.argmax(rel), rel.shape) if rel.size else ()
        max_err = float(rel[worst]) if rel.size else 0.0
        reports.append(GradientReport(
            slot=name, shape=tuple(base.shape), n_coords=int(base.size),
            max_rel_err=max_err, worst_coord=tuple(int(i) for i in worst),
            analytic=float(g[worst]) if rel.size else 0.0,
            numeric=float(num[worst]) if rel.size else 0.0,
            passed=bool(max_err < rel_tol),
        ))
    return reports
