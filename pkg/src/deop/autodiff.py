"""Reverse-mode automatic differentiation on an eager, double-precision tape.

Every value recorded on a :class:`Tape` is computed immediately and cached; the
tape keeps the nodes in creation order, which is a topological order, so the
backward pass is a single reverse sweep.

The module-level functions (``sin``, ``matmul``, ``relu`` ...) are polymorphic:
called with plain arrays they return plain numpy results, called with at least
one :class:`Var` they record a node.  Model code (vector fields, residuals,
networks) is written once against these functions and runs both ways.

Non-smooth primitives (``relu``, ``abs``, ``clip``) use subgradient 0 at their
kinks.  Inside :func:`recording_kinks` their untaped evaluations also report
kink arguments, so finite-difference checks can detect kink crossings without
building a tape.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ADError", "ShapeError", "Tape", "Var", "Gradients", "finite_diff_check", "gradient_check",
    "add", "sub", "mul", "div", "neg", "matmul", "matvec", "dot", "affine",
    "sin", "cos", "exp", "log", "sqrt", "square", "abs", "relu", "max_zero",
    "sigmoid", "tanh", "atan2", "power", "sum", "mean", "reshape", "transpose",
    "concat", "stack", "clip", "getitem", "is_var", "value_of", "lincomb", "mlp", "where",
    "recording_kinks", "note_kinks",
]

_kink_sink: list | None = None


@contextlib.contextmanager
def recording_kinks():
    """Collect kink arguments of untaped non-smooth evaluations into the yielded list."""
    global _kink_sink
    prev, _kink_sink = _kink_sink, []
    try:
        yield _kink_sink
    finally:
        _kink_sink = prev


def note_kinks(*args) -> None:
    """Report kink arguments of a non-smooth step computed outside the tape."""
    if _kink_sink is not None:
        _kink_sink.extend(args)


class ADError(ValueError):
    """Misuse of the tape (non-scalar backward, mixed tapes, bad values)."""


class ShapeError(ADError):
    """Operand shapes do not conform to a primitive."""

    def __init__(self, primitive: str, *shapes: tuple):
        self.primitive = primitive
        self.shapes = shapes
        desc = ", ".join(str(s) for s in shapes)
        super().__init__(f"{primitive}: incompatible operand shapes {desc}")


class Var:
    """A value-ref on a tape."""

    __slots__ = ("tape", "index", "value", "op", "parents", "vjps", "requires_grad", "kinks")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, tape, value, op, parents=(), vjps=(), requires_grad=False):
        self.tape = tape
        self.value = value
        self.op = op
        self.parents = parents
        self.vjps = vjps
        self.requires_grad = requires_grad
        self.kinks = None  # arguments of non-smooth primitives, zero at a kink
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    # array-like surface
    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Gradients:
    """Gradients of a scalar output with respect to the leaf parameters of a tape."""

    def __init__(self, grads: dict[int, np.ndarray], leaves: list[Var]):
        self._grads = grads
        self._leaves = leaves

    def __getitem__(self, leaf: Var) -> np.ndarray:
        g = self._grads.get(leaf.index)
        if g is None:
            return np.zeros_like(leaf.value)
        return g

    def __contains__(self, leaf: Var) -> bool:
        return leaf.index in self._grads

    def __iter__(self):
        return iter(self._leaves)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self._grads.values())


class Tape:
    """Ordered record of computations for one backward pass."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.leaves: list[Var] = []

    def param(self, value, name: str | None = None) -> Var:
        """Register a trainable leaf; gradients are reported for it."""
        v = Var(self, _as_array(value), "leaf" if name is None else f"leaf:{name}",
                requires_grad=True)
        self.leaves.append(v)
        return v

    def const(self, value) -> Var:
        return Var(self, _as_array(value), "const")

    def record(self, op: str, *inputs, **kwargs) -> Var:
        """Record primitive ``op`` applied to ``inputs`` (arrays are lifted to constants)."""
        fn = PRIMITIVES.get(op)
        if fn is None:
            raise ADError(f"unknown primitive {op!r}")
        lifted = [x if isinstance(x, Var) else self.const(x) for x in inputs]
        for x in lifted:
            if x.tape is not self:
                raise ADError(f"{op}: input recorded on a different tape")
        return fn(*lifted, **kwargs)

    def kink_pattern(self) -> np.ndarray:
        """Side of every kink (argument > 0) over all non-smooth nodes recorded so far."""
        parts = [np.ravel(k > 0.0) for v in self.nodes if v.kinks is not None for k in v.kinks]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)

    def backward(self, output: Var) -> Gradients:
        if not isinstance(output, Var) or output.tape is not self:
            raise ADError("backward: output must be a value-ref on this tape")
        if output.value.size != 1:
            raise ADError(f"backward: output must be scalar, got shape {output.value.shape}")
        grads: dict[int, np.ndarray] = {output.index: np.ones_like(output.value)}
        nodes = self.nodes
        for i in range(output.index, -1, -1):
            g = grads.get(i)
            if g is None:
                continue
            node = nodes[i]
            if not node.parents:
                continue
            del grads[i]
            for p, vjp in zip(node.parents, node.vjps):
                gp = vjp(g)
                j = p.index
                prev = grads.get(j)
                grads[j] = gp if prev is None else prev + gp
        leaf_grads = {v.index: grads[v.index] for v in self.leaves if v.index in grads}
        return Gradients(leaf_grads, list(self.leaves))


# ---------------------------------------------------------------------------
# helpers

def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


def is_var(x) -> bool:
    return isinstance(x, Var)


def value_of(x):
    """Numeric value of a Var or array-like."""
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ADError("operands recorded on different tapes")
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _node(tape, value, op, parents, vjps):
    parents, vjps = tuple(parents), tuple(vjps)
    keep = [isinstance(p, Var) and p.requires_grad for p in parents]
    if all(keep):
        return Var(tape, value, op, parents, vjps, requires_grad=bool(parents))
    keep_p = tuple(p for p, k in zip(parents, keep) if k)
    keep_f = tuple(f for f, k in zip(vjps, keep) if k)
    return Var(tape, value, op, keep_p, keep_f, requires_grad=bool(keep_p))


def _binary(name, a, b, fwd, ga, gb):
    tape = _tape_of(a, b)
    av = a.value if isinstance(a, Var) else np.asarray(a, dtype=np.float64)
    bv = b.value if isinstance(b, Var) else np.asarray(b, dtype=np.float64)
    try:
        out = fwd(av, bv)
    except ValueError:
        raise ShapeError(name, av.shape, bv.shape) from None
    if tape is None:
        return out
    sa, sb = av.shape, bv.shape
    return _node(tape, out, name, (a, b),
                 (lambda g: _unbroadcast(ga(g, av, bv, out), sa),
                  lambda g: _unbroadcast(gb(g, av, bv, out), sb)))


def _unary(name, x, fwd, grad, kinks=None):
    if not isinstance(x, Var):
        xv = np.asarray(x, dtype=np.float64)
        if kinks is not None and _kink_sink is not None:
            _kink_sink.extend(kinks(xv))
        return fwd(xv)
    xv = x.value
    out = fwd(xv)
    node = _node(x.tape, out, name, (x,), (lambda g: grad(g, xv, out),))
    if kinks is not None:
        node.kinks = kinks(xv)
    return node


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    return _binary("add", a, b, np.add, lambda g, a, b, o: g, lambda g, a, b, o: g)


def sub(a, b):
    return _binary("subtract", a, b, np.subtract, lambda g, a, b, o: g, lambda g, a, b, o: -g)


def mul(a, b):
    return _binary("multiply", a, b, np.multiply,
                   lambda g, a, b, o: g * b, lambda g, a, b, o: g * a)


def div(a, b):
    return _binary("divide", a, b, np.divide,
                   lambda g, a, b, o: g / b, lambda g, a, b, o: -g * o / b)


def neg(x):
    return _unary("negate", x, np.negative, lambda g, x, o: -g)


def power(x, p: float):
    p = float(p)
    return _unary("power", x, lambda v: v ** p, lambda g, x, o: g * p * x ** (p - 1.0))


def sin(x):
    return _unary("sin", x, np.sin, lambda g, x, o: g * np.cos(x))


def cos(x):
    return _unary("cos", x, np.cos, lambda g, x, o: -g * np.sin(x))


def exp(x):
    return _unary("exp", x, np.exp, lambda g, x, o: g * o)


def log(x):
    return _unary("log", x, np.log, lambda g, x, o: g / x)


def sqrt(x):
    return _unary("sqrt", x, np.sqrt, lambda g, x, o: g * 0.5 / o)


def square(x):
    return _unary("square", x, np.square, lambda g, x, o: 2.0 * g * x)


def abs(x):  # noqa: A001 - mirrors numpy naming
    return _unary("abs", x, np.abs, lambda g, x, o: g * np.sign(x), lambda v: (v,))


def relu(x):
    return _unary("relu", x, lambda v: np.maximum(v, 0.0), lambda g, x, o: g * (x > 0.0),
                  lambda v: (v,))


def max_zero(x):
    """``max(x, 0)``; identical to :func:`relu`, kept as the constraint-violation spelling."""
    return _unary("max_zero", x, lambda v: np.maximum(v, 0.0), lambda g, x, o: g * (x > 0.0),
                  lambda v: (v,))


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x):
    return _unary("sigmoid", x, _sigmoid, lambda g, x, o: g * o * (1.0 - o))


def tanh(x):
    return _unary("tanh", x, np.tanh, lambda g, x, o: g * (1.0 - o * o))


def atan2(y, x):
    def gy(g, y, x, o):
        return g * x / (x * x + y * y)

    def gx(g, y, x, o):
        return -g * y / (x * x + y * y)

    return _binary("atan2", y, x, np.arctan2, gy, gx)


def where(mask, a, b):
    """``a`` where the constant boolean ``mask`` holds, else ``b``."""
    mask = np.asarray(mask, dtype=bool)
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.where(mask, av, bv).astype(np.float64)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _node(tape, out, "where", (a, b),
                 (lambda g: _unbroadcast(np.where(mask, g, 0.0), sa),
                  lambda g: _unbroadcast(np.where(mask, 0.0, g), sb)))


def clip(x, lo: float, hi: float):
    """Clamp to ``[lo, hi]``; gradient passes only where the input is inside the interval."""
    return _unary("clip", x, lambda v: np.clip(v, lo, hi),
                  lambda g, x, o: g * ((x >= lo) & (x <= hi)), lambda v: (v - lo, v - hi))


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    tape = _tape_of(a, b)
    av = a.value if isinstance(a, Var) else np.asarray(a, dtype=np.float64)
    bv = b.value if isinstance(b, Var) else np.asarray(b, dtype=np.float64)
    if av.ndim == 0 or bv.ndim == 0 or bv.ndim > 2:
        raise ShapeError("matmul", av.shape, bv.shape)
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError("matvec" if bv.ndim == 1 else "matmul", av.shape, bv.shape)
    out = av @ bv
    if tape is None:
        return out

    def ga(g):
        if bv.ndim == 1:
            return g[..., None] * bv
        return g @ bv.T

    def gb(g):
        if av.ndim == 1:
            return np.outer(av, g) if bv.ndim == 2 else g * av
        a2 = av.reshape(-1, av.shape[-1])
        if bv.ndim == 1:
            return a2.T @ g.reshape(-1)
        return a2.T @ g.reshape(-1, g.shape[-1])

    name = "matvec" if bv.ndim == 1 else "matmul"
    return _node(tape, out, name, (a, b), (ga, gb))


def matvec(A, v):
    vv = value_of(v)
    if np.ndim(vv) != 1:
        raise ShapeError("matvec", np.shape(value_of(A)), np.shape(vv))
    return matmul(A, v)


def dot(a, b):
    if np.ndim(value_of(a)) != 1 or np.ndim(value_of(b)) != 1:
        raise ShapeError("dot", np.shape(value_of(a)), np.shape(value_of(b)))
    return matmul(a, b)


def affine(x, W, b):
    """``x @ W.T + b`` as one node; W is (out, in), x is (..., in)."""
    tape = _tape_of(x, W, b)
    xv, Wv, bv = value_of(x), value_of(W), value_of(b)
    if np.shape(xv)[-1:] != np.shape(Wv)[1:] or np.shape(bv) != np.shape(Wv)[:1]:
        raise ShapeError("affine", np.shape(xv), np.shape(Wv), np.shape(bv))
    out = xv @ Wv.T + bv
    if tape is None:
        return out

    def gx(g):
        return g @ Wv

    def gW(g):
        if xv.ndim == 1:
            return np.outer(g, xv)
        return g.reshape(-1, g.shape[-1]).T @ xv.reshape(-1, xv.shape[-1])

    def gbias(g):
        return g.reshape(-1, g.shape[-1]).sum(axis=0) if g.ndim > 1 else g

    return _node(tape, out, "affine", (x, W, b), (gx, gW, gbias))


def lincomb(coeffs: Sequence[float], xs: Sequence):
    """``sum_i coeffs[i] * xs[i]`` with constant coefficients, recorded as one node."""
    tape = _tape_of(*xs)
    vals = [value_of(x) for x in xs]
    out = coeffs[0] * vals[0]
    for c, v in zip(coeffs[1:], vals[1:]):
        out = out + c * v
    if tape is None:
        return out
    shapes = [np.shape(v) for v in vals]
    vjps = tuple((lambda g, c=float(c), s=s: _unbroadcast(c * g, s))
                 for c, s in zip(coeffs, shapes))
    return _node(tape, out, "lincomb", tuple(xs), vjps)


def mlp(x, layers: Sequence[tuple]):
    """Dense ReLU network (identity on the last layer) recorded as one node.

    ``layers`` holds ``(W, b)`` pairs with W shaped (out, in).  Weights may also
    carry a leading stack axis, W (G, out, in) and b (G, out), in which case x is
    (G, batch, in) and G independent networks are evaluated side by side.
    """
    flat = []
    for W, b in layers:
        flat.extend((W, b))
    tape = _tape_of(x, *flat)
    xv = value_of(x)
    Ws = [value_of(W) for W, _ in layers]
    bs = [value_of(b) for _, b in layers]
    stacked = Ws[0].ndim == 3
    acts = [xv]
    pre = []
    h = xv
    n = len(layers)
    for k, (W, b) in enumerate(zip(Ws, bs)):
        if h.shape[-1] != W.shape[-1]:
            raise ShapeError("mlp", h.shape, W.shape)
        if stacked:
            z = np.matmul(h, np.swapaxes(W, -1, -2)) + b[:, None, :]
        else:
            z = h @ W.T + b
        if k < n - 1:
            pre.append(z)
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            h = z
    out = h
    if tape is None:
        note_kinks(*pre)
        return out

    cache = {}

    def run(g):
        key = id(g)
        if key in cache:
            return cache[key]
        grads_x = None
        gp = [None] * (2 * n)
        gz = g
        for k in range(n - 1, -1, -1):
            a = acts[k]
            if stacked:
                gp[2 * k] = np.matmul(np.swapaxes(gz, -1, -2), a)
                gp[2 * k + 1] = gz.sum(axis=1)
            else:
                g2 = gz.reshape(-1, gz.shape[-1])
                gp[2 * k] = g2.T @ a.reshape(-1, a.shape[-1])
                gp[2 * k + 1] = g2.sum(axis=0)
            ga = np.matmul(gz, Ws[k]) if stacked else gz @ Ws[k]
            if k > 0:
                gz = ga * (pre[k - 1] > 0.0)
            else:
                grads_x = ga
        cache.clear()
        cache[key] = (grads_x, gp)
        return cache[key]

    vjps = [lambda g: run(g)[0]]
    for j in range(2 * n):
        vjps.append(lambda g, j=j: run(g)[1][j])
    node = _node(tape, out, "mlp", (x, *flat), tuple(vjps))
    node.kinks = tuple(pre)
    return node


# ---------------------------------------------------------------------------
# reductions and structure

def sum(x, axis=None, keepdims=False):  # noqa: A001
    if not isinstance(x, Var):
        return np.sum(x, axis=axis, keepdims=keepdims)
    xv = x.value
    out = np.sum(xv, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, xv.shape).copy()

    return _node(x.tape, np.asarray(out, dtype=np.float64), "sum", (x,), (vjp,))


def mean(x, axis=None, keepdims=False):
    xv = value_of(x)
    n = xv.size if axis is None else np.prod([xv.shape[a] for a in np.atleast_1d(axis)])
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def reshape(x, shape):
    if not isinstance(x, Var):
        return np.reshape(x, shape)
    s0 = x.value.shape
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", s0, tuple(np.atleast_1d(shape))) from None
    return _node(x.tape, out, "reshape", (x,), (lambda g: g.reshape(s0),))


def transpose(x, axes=None):
    if not isinstance(x, Var):
        return np.transpose(x, axes)
    out = np.transpose(x.value, axes)
    inv = None if axes is None else np.argsort(axes)
    return _node(x.tape, out, "transpose", (x,), (lambda g: np.transpose(g, inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None
               for i in items)


def getitem(x, idx):
    if not isinstance(x, Var):
        return np.asarray(x)[idx]
    xv = x.value
    out = xv[idx]
    basic = _is_basic_index(idx)

    def vjp(g):
        z = np.zeros_like(xv)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return z

    return _node(x.tape, np.array(out, dtype=np.float64), "getitem", (x,), (vjp,))


def concat(xs: Sequence, axis: int = 0):
    tape = _tape_of(*xs)
    vals = [value_of(x) for x in xs]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        raise ShapeError("concat", *[np.shape(v) for v in vals]) from None
    if tape is None:
        return out
    bounds = np.cumsum([0] + [np.shape(v)[axis] for v in vals])
    vjps = []
    for k in range(len(vals)):
        lo, hi = int(bounds[k]), int(bounds[k + 1])

        def vjp(g, lo=lo, hi=hi):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        vjps.append(vjp)
    return _node(tape, out, "concat", tuple(xs), tuple(vjps))


def stack(xs: Sequence, axis: int = 0):
    tape = _tape_of(*xs)
    vals = [value_of(x) for x in xs]
    try:
        out = np.stack(vals, axis=axis)
    except ValueError:
        raise ShapeError("stack", *[np.shape(v) for v in vals]) from None
    if tape is None:
        return out
    vjps = []
    for k in range(len(vals)):
        vjps.append(lambda g, k=k: np.take(g, k, axis=axis))
    return _node(tape, out, "stack", tuple(xs), tuple(vjps))


PRIMITIVES: dict[str, Callable] = {
    "add": add, "subtract": sub, "multiply": mul, "divide": div, "negate": neg,
    "matvec": matvec, "matmul": matmul, "dot": dot, "affine": affine,
    "sin": sin, "cos": cos, "exp": exp, "log": log, "sqrt": sqrt, "square": square,
    "abs": abs, "max_zero": max_zero, "relu": relu, "sigmoid": sigmoid, "tanh": tanh,
    "atan2": atan2, "sum": sum, "mean": mean, "clip": clip,
}


def finite_diff_check(f: Callable, point, step: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    ``f`` must accept either an array or a :class:`Var` and return a scalar.
    """
    if step <= 0:
        raise ADError("finite_diff_check: step must be positive")
    x0 = np.array(point, dtype=np.float64)
    tape = Tape()
    xv = tape.param(x0)
    out = f(xv)
    if not isinstance(out, Var):
        out = tape.const(out)
    if not np.all(np.isfinite(out.value)):
        raise ADError("finite_diff_check: f is not finite at the point")
    ad_grad = tape.backward(out)[xv].ravel()
    fd = np.empty(x0.size)
    flat = x0.ravel()
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        fp = float(np.asarray(f(xp.reshape(x0.shape))))
        fm = float(np.asarray(f(xm.reshape(x0.shape))))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ADError("finite_diff_check: f is not finite near the point")
        fd[i] = (fp - fm) / (2.0 * step)
    err = np.abs(ad_grad - fd) / (np.abs(fd) + 1e-12)
    return float(err.max()) if err.size else 0.0


def gradient_check(f: Callable, point, step: float = 1e-5) -> tuple[float, bool]:
    """:func:`finite_diff_check` that also reports whether the stencil crosses a kink.

    ``f`` must accept plain arrays as well as taped values.  Stencil points are
    evaluated without a tape under :func:`recording_kinks`, and their kink
    pattern is compared with the one at ``point``.  When the second return
    value is true the finite-difference oracle is not valid at ``point``.
    """
    if step <= 0:
        raise ADError("gradient_check: step must be positive")
    x0 = np.array(point, dtype=np.float64)
    tape = Tape()
    xv = tape.param(x0)
    out = f(xv)
    if not isinstance(out, Var):
        out = tape.const(out)
    if not np.all(np.isfinite(out.value)):
        raise ADError("gradient_check: f is not finite at the point")
    ad_grad = tape.backward(out)[xv].ravel()

    def untaped(x):
        with recording_kinks() as sink:
            v = float(np.asarray(value_of(f(x))))
        pat = [np.ravel(k > 0.0) for k in sink]
        return v, (np.concatenate(pat) if pat else np.zeros(0, dtype=bool))

    _, ref = untaped(x0)
    flat = x0.ravel()
    fd = np.empty(flat.size)
    crossed = False
    for i in range(flat.size):
        vals = []
        for s in (step, -step):
            xs = flat.copy()
            xs[i] += s
            v, pat = untaped(xs.reshape(x0.shape))
            if not np.isfinite(v):
                raise ADError("gradient_check: f is not finite near the point")
            crossed = crossed or pat.shape != ref.shape or not np.array_equal(pat, ref)
            vals.append(v)
        fd[i] = (vals[0] - vals[1]) / (2.0 * step)
    err = np.abs(ad_grad - fd) / (np.abs(fd) + 1e-12)
    return (float(err.max()) if err.size else 0.0), crossed
