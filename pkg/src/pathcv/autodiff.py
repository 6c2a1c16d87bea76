"""Reverse-mode automatic differentiation on a flat tape of numpy values.

The tape records array-valued nodes in evaluation order; each node keeps the
indices of its parents and a closure computing the vector-Jacobian product.
A fresh tape is built per gradient evaluation (append-only, no reuse), which
keeps the machinery deterministic: identical input bits give identical
output bits.

Ops broadcast along leading axes the way numpy does, so the same model code
evaluates a single point or a batch. Gradients flowing into a broadcast
operand are summed back down to its original shape.

Conventions that matter downstream:
  * everything is float64,
  * relu'(0) = 0,
  * exp and tanh clamp their inputs to [-60, 60] and the derivative is the
    exact derivative of the clamped function (zero outside the window),
  * any non-finite intermediate raises NumericError naming the primitive.
"""

from __future__ import annotations

import numpy as np

CLAMP = 60.0


class NumericError(ArithmeticError):
    """A primitive produced a non-finite value (overflow, log of <= 0, ...)."""


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` after numpy broadcasting."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tape:
    """Append-only record of one computation, used once for backward()."""

    def __init__(self):
        self._parents = []  # list of tuples of parent node ids
        self._vjps = []     # list of callables: adjoint -> tuple of parent adjoints
        self._adjoints = None

    def var(self, value):
        """Register a leaf input and return its Var handle."""
        return self._record(_as_array(value), (), None, "input")

    def _record(self, value, parents, vjp, op):
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite result in primitive '{op}'")
        idx = len(self._parents)
        self._parents.append(parents)
        self._vjps.append(vjp)
        return Var(self, idx, value)

    def backward(self, out, seed=None):
        """Accumulate adjoints from `out` back to every reachable node.

        `seed` defaults to ones of out's shape; passing a vector seed on a
        batched output yields per-row gradients when the graph is
        row-separable (each output element depends on its own input row).
        """
        n = len(self._parents)
        adj = [None] * n
        adj[out.idx] = np.ones_like(out.value) if seed is None else \
            np.broadcast_to(_as_array(seed), out.value.shape).astype(np.float64)
        # accumulation is out-of-place, so views handed back by VJPs are safe
        with np.errstate(all="ignore"):
            for i in range(out.idx, -1, -1):
                g = adj[i]
                if g is None or self._vjps[i] is None:
                    continue
                for pid, pg in zip(self._parents[i], self._vjps[i](g)):
                    adj[pid] = pg if adj[pid] is None else adj[pid] + pg
        self._adjoints = adj


class Var:
    """Handle to one tape node: holds the node value and builds new nodes."""

    # keep numpy from intercepting ndarray <op> Var element-wise
    __array_ufunc__ = None

    __slots__ = ("tape", "idx", "value")

    def __init__(self, tape, idx, value):
        self.tape = tape
        self.idx = idx
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def grad(self):
        adj = self.tape._adjoints
        if adj is None:
            raise RuntimeError("backward() has not been run on this tape")
        g = adj[self.idx]
        return np.zeros_like(self.value) if g is None else g

    # -- binary arithmetic ------------------------------------------------

    def _binary(self, other, op, fwd, vjp_self, vjp_other):
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise ValueError("operands recorded on different tapes")
            with np.errstate(all="ignore"):
                val = fwd(self.value, other.value)
            a_shape, b_shape = self.value.shape, other.value.shape
            av, bv = self.value, other.value

            def vjp(g):
                return (_unbroadcast(vjp_self(g, av, bv), a_shape),
                        _unbroadcast(vjp_other(g, av, bv), b_shape))

            return self.tape._record(val, (self.idx, other.idx), vjp, op)
        c = _as_array(other)
        with np.errstate(all="ignore"):
            val = fwd(self.value, c)
        a_shape, av = self.value.shape, self.value

        def vjp(g):
            return (_unbroadcast(vjp_self(g, av, c), a_shape),)

        return self.tape._record(val, (self.idx,), vjp, op)

    def __add__(self, other):
        return self._binary(other, "add", lambda a, b: a + b,
                            lambda g, a, b: g, lambda g, a, b: g)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, "sub", lambda a, b: a - b,
                            lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        return self._binary(other, "mul", lambda a, b: a * b,
                            lambda g, a, b: g * b, lambda g, a, b: g * a)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._binary(other, "div", lambda a, b: a / b,
                            lambda g, a, b: g / b,
                            lambda g, a, b: -g * a / (b * b))

    def __rtruediv__(self, other):
        c = _as_array(other)
        with np.errstate(all="ignore"):
            val = c / self.value
        a_shape, av = self.value.shape, self.value

        def vjp(g):
            return (_unbroadcast(-g * c / (av * av), a_shape),)

        return self.tape._record(val, (self.idx,), vjp, "div")

    def __neg__(self):
        return self.tape._record(-self.value, (self.idx,),
                                 lambda g: (-g,), "neg")

    # -- unary elementwise -------------------------------------------------

    def exp(self):
        x = self.value
        val = np.exp(np.clip(x, -CLAMP, CLAMP))
        live = (np.abs(x) <= CLAMP).astype(np.float64)
        return self.tape._record(val, (self.idx,),
                                 lambda g: (g * val * live,), "exp")

    def log(self):
        with np.errstate(all="ignore"):
            val = np.log(self.value)
        x = self.value
        return self.tape._record(val, (self.idx,),
                                 lambda g: (g / x,), "log")

    def tanh(self):
        val = np.tanh(np.clip(self.value, -CLAMP, CLAMP))
        live = (np.abs(self.value) <= CLAMP).astype(np.float64)
        return self.tape._record(val, (self.idx,),
                                 lambda g: (g * (1.0 - val * val) * live,), "tanh")

    def relu(self):
        mask = (self.value > 0).astype(np.float64)  # derivative at 0 is 0
        return self.tape._record(self.value * mask, (self.idx,),
                                 lambda g: (g * mask,), "relu")

    def square(self):
        x = self.value
        with np.errstate(all="ignore"):     # non-finite caught by _record
            val = x * x
        return self.tape._record(val, (self.idx,),
                                 lambda g: (2.0 * g * x,), "square")

    # -- reductions and shape ----------------------------------------------

    def sum(self, axis=None):
        val = self.value.sum(axis=axis)
        shape = self.value.shape

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, shape).astype(np.float64),)
            ax = axis if isinstance(axis, tuple) else (axis,)
            ax = tuple(a % len(shape) for a in ax)
            g_exp = np.expand_dims(g, ax)
            return (np.broadcast_to(g_exp, shape).astype(np.float64),)

        return self.tape._record(val, (self.idx,), vjp, "sum")

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        old = self.value.shape
        return self.tape._record(self.value.reshape(shape), (self.idx,),
                                 lambda g: (g.reshape(old),), "reshape")

    def transpose_last(self):
        """Swap the last two axes."""
        return self.tape._record(np.swapaxes(self.value, -1, -2), (self.idx,),
                                 lambda g: (np.swapaxes(g, -1, -2),), "transpose")

    def __getitem__(self, idx):
        shape = self.value.shape
        parts = idx if isinstance(idx, tuple) else (idx,)
        basic = all(isinstance(p, (slice, int, type(Ellipsis), type(None))) for p in parts)

        def vjp(g):
            out = np.zeros(shape, dtype=np.float64)
            if basic:  # basic indices never repeat positions
                out[idx] += g
            else:
                np.add.at(out, idx, g)
            return (out,)

        return self.tape._record(self.value[idx], (self.idx,), vjp, "getitem")

    # -- linear algebra ------------------------------------------------------

    def matinv(self):
        with np.errstate(all="ignore"):
            val = np.linalg.inv(self.value)

        def vjp(g):
            vt = np.swapaxes(val, -1, -2)
            return (-vt @ g @ vt,)

        return self.tape._record(val, (self.idx,), vjp, "matinv")

    def logdet(self):
        sign, val = np.linalg.slogdet(self.value)
        if not np.all(sign > 0):
            raise NumericError("non-finite result in primitive 'logdet'")
        inv_t = np.swapaxes(np.linalg.inv(self.value), -1, -2)

        def vjp(g):
            return (np.asarray(g)[..., None, None] * inv_t,)

        return self.tape._record(val, (self.idx,), vjp, "logdet")


# -- dispatching functional layer -------------------------------------------
#
# Family/model code is written against these functions so the same source
# runs on plain ndarrays (value-only evaluation) and on tape Vars (gradient
# evaluation). The ndarray paths mirror the Var semantics bit for bit,
# clamping included.

def exp(x):
    return x.exp() if isinstance(x, Var) else np.exp(np.clip(_as_array(x), -CLAMP, CLAMP))


def log(x):
    if isinstance(x, Var):
        return x.log()
    with np.errstate(all="ignore"):
        v = np.log(_as_array(x))
    if not np.all(np.isfinite(v)):
        raise NumericError("non-finite result in primitive 'log'")
    return v


def tanh(x):
    return x.tanh() if isinstance(x, Var) else np.tanh(np.clip(_as_array(x), -CLAMP, CLAMP))


def relu(x):
    if isinstance(x, Var):
        return x.relu()
    x = _as_array(x)
    return x * (x > 0)


def square(x):
    return x.square() if isinstance(x, Var) else np.square(_as_array(x))


def vsum(x, axis=None):
    return x.sum(axis=axis) if isinstance(x, Var) else _as_array(x).sum(axis=axis)


def reshape(x, shape):
    return x.reshape(shape) if isinstance(x, Var) else _as_array(x).reshape(shape)


def transpose_last(x):
    return x.transpose_last() if isinstance(x, Var) else np.swapaxes(_as_array(x), -1, -2)


def softplus(x):
    """log(1 + e^x), composed from primitives in overflow-safe form."""
    ax = relu(x) + relu(-x)          # |x| with relu'(0)=0 convention
    return relu(x) + log(1.0 + exp(-ax))


def _tape_of(*args):
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _lift(tape, x):
    return x if isinstance(x, Var) else tape.var(x)


def dot(a, b):
    """Inner product over the last axis: einsum('...i,...i->...')."""
    tape = _tape_of(a, b)
    if tape is None:
        return np.einsum("...i,...i->...", _as_array(a), _as_array(b))
    a, b = _lift(tape, a), _lift(tape, b)
    val = np.einsum("...i,...i->...", a.value, b.value)
    av, bv = a.value, b.value

    def vjp(g):
        g = np.asarray(g)[..., None]
        return (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))

    return tape._record(val, (a.idx, b.idx), vjp, "dot")


def matvec(a, x):
    """Matrix-vector product over trailing axes: einsum('...ij,...j->...i').

    Leading axes broadcast, so an unbatched matrix applies to a batch of
    vectors (and vice versa) without copies.
    """
    tape = _tape_of(a, x)
    if tape is None:
        return np.einsum("...ij,...j->...i", _as_array(a), _as_array(x))
    a, x = _lift(tape, a), _lift(tape, x)
    val = np.einsum("...ij,...j->...i", a.value, x.value)
    av, xv = a.value, x.value

    def vjp(g):
        ga = np.einsum("...i,...j->...ij", g, xv)
        gx = np.einsum("...ij,...i->...j", av, g)
        return (_unbroadcast(ga, av.shape), _unbroadcast(gx, xv.shape))

    return tape._record(val, (a.idx, x.idx), vjp, "matvec")


def matmul(a, b):
    """np.matmul semantics on stacks of matrices (operands must be >= 2-D)."""
    tape = _tape_of(a, b)
    if tape is None:
        return np.matmul(_as_array(a), _as_array(b))
    a, b = _lift(tape, a), _lift(tape, b)
    val = np.matmul(a.value, b.value)
    av, bv = a.value, b.value

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return (_unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape))

    return tape._record(val, (a.idx, b.idx), vjp, "matmul")


def matinv(x):
    return x.matinv() if isinstance(x, Var) else np.linalg.inv(_as_array(x))


def logdet(x):
    if isinstance(x, Var):
        return x.logdet()
    sign, val = np.linalg.slogdet(_as_array(x))
    if not np.all(sign > 0):
        raise NumericError("non-finite result in primitive 'logdet'")
    return val


def value_of(x):
    """Plain float64 payload of a Var or array-like."""
    return x.value if isinstance(x, Var) else _as_array(x)


# -- public gradient entry points --------------------------------------------

def grad(f, x):
    """Evaluate scalar-valued f at x and return (value, gradient).

    f receives a Var wrapping x and must build its result from tape
    primitives. The tape is constructed fresh inside the call and discarded.
    """
    tape = Tape()
    xv = tape.var(x)
    out = f(xv)
    if not isinstance(out, Var):
        raise TypeError("f must return a tape Var")
    if out.value.ndim != 0:
        raise ValueError("grad() requires a scalar-valued function")
    tape.backward(out)
    return float(out.value), xv.grad


def check_gradient_fd(f, x, step=1e-5):
    """Max relative error between grad(f, x) and central finite differences.

    Relative error per coordinate is |ad - fd| / (|fd| + 1e-12).
    """
    x = _as_array(x)
    _, g = grad(f, x)

    def value(p):
        tape = Tape()
        out = f(tape.var(p))
        return float(out.value)

    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += step
        lo[i] -= step
        fd = (value(hi.reshape(x.shape)) - value(lo.reshape(x.shape))) / (2.0 * step)
        err = abs(g.reshape(-1)[i] - fd) / (abs(fd) + 1e-12)
        worst = max(worst, err)
    return worst
