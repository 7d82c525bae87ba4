"""Define-by-run reverse-mode differentiation over numpy arrays.

Operations executed inside ``with Tape() as tape:`` are recorded when at least
one input requires a gradient. :func:`backward` replays the tape in reverse and
writes ``leaf.grad`` for every leaf with ``requires_grad`` that the tape
touched. Grads are overwritten on each call, never accumulated across calls.
"""

import math
import weakref

import numpy as np
from scipy.special import erf

from kpft import backend

LN_EPS = 1e-6

_tapes = []


class GradError(RuntimeError):
    pass


class Var:
    __slots__ = ("value", "requires_grad", "grad", "node", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value)
        self.requires_grad = requires_grad
        self.grad = None
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Var{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Node:
    # No reference back to the output Var or (strongly) to the tape, so a
    # finished graph is freed by refcounting alone.
    __slots__ = ("op", "parents", "vjp", "_tape", "index")

    def __init__(self, op, parents, vjp, tape, index):
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self._tape = weakref.ref(tape)
        self.index = index

    @property
    def tape(self):
        return self._tape()


class Tape:
    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def current_tape():
    return _tapes[-1] if _tapes else None


def _as_var(x):
    return x if isinstance(x, Var) else Var(x)


def primitive(op, value, parents, vjp):
    """Wrap ``value`` in a Var and record it if any parent needs a gradient.

    ``vjp(g)`` must return one gradient (or None) per parent.
    """
    out = Var(value)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, tuple(parents), vjp, tape, len(tape.nodes))
        tape.nodes.append(out.node)
    return out


def backward(loss, tape):
    if loss.value.size != 1:
        raise GradError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss.node
    if node is None or node.tape is not tape:
        raise GradError("loss was not produced on this tape (detached graph)")

    # interior values are keyed by their node, leaves by the Var itself
    grads = {id(node): np.ones_like(loss.value)}
    leaves = {}
    for nd in tape.nodes[: node.index + 1]:
        for p in nd.parents:
            if p.requires_grad and p.node is None:
                leaves.setdefault(id(p), p)

    for nd in reversed(tape.nodes[: node.index + 1]):
        g = grads.pop(id(nd), None)
        if g is None:
            continue
        for parent, pg in zip(nd.parents, nd.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent) if parent.node is None else id(parent.node)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    for key, leaf in leaves.items():
        g = grads.get(key)
        leaf.grad = np.zeros_like(leaf.value) if g is None else np.asarray(g, dtype=leaf.value.dtype).reshape(leaf.shape)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = _as_var(a), _as_var(b)
    return primitive("add", a.value + b.value, (a, b),
                     lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                                _unbroadcast(g, b.shape) if b.requires_grad else None))


def sub(a, b):
    a, b = _as_var(a), _as_var(b)
    return primitive("sub", a.value - b.value, (a, b),
                     lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                                -_unbroadcast(g, b.shape) if b.requires_grad else None))


def mul(a, b):
    a, b = _as_var(a), _as_var(b)
    return primitive("mul", a.value * b.value, (a, b),
                     lambda g: (_unbroadcast(g * b.value, a.shape) if a.requires_grad else None,
                                _unbroadcast(g * a.value, b.shape) if b.requires_grad else None))


def scale(a, alpha):
    return primitive("scale", a.value * alpha, (a,), lambda g: (g * alpha,))


# -- shape ---------------------------------------------------------------------

def reshape(a, shape):
    return primitive("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.value.ndim))[::-1]
    inverse = tuple(np.argsort(axes))
    return primitive("transpose", np.transpose(a.value, axes), (a,),
                     lambda g: (np.transpose(g, inverse),))


def take(a, i):
    """The i-th slice along the leading axis."""
    def vjp(g):
        ga = np.zeros_like(a.value)
        ga[i] = g
        return (ga,)

    return primitive("take", a.value[i], (a,), vjp)


def total(a):
    """Sum of all elements as a 1x1 Var."""
    return primitive("sum", np.sum(a.value).reshape(1, 1), (a,),
                     lambda g: (np.broadcast_to(g.reshape(()), a.shape).copy(),))


def mean(a, axis):
    n = a.shape[axis]

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape) / n,)

    return primitive("mean", a.value.mean(axis=axis), (a,), vjp)


# -- linear algebra --------------------------------------------------------------

def matmul(a, b):
    a, b = _as_var(a), _as_var(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ValueError("matmul operands must have rank >= 2")

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)
        return ga, gb

    return primitive("matmul", np.matmul(a.value, b.value), (a, b), vjp)


def outer(s, t):
    """Rank-r product s @ t; batched over leading dims."""
    if s.shape[-1] < 1:
        raise ValueError("rank dimension must be >= 1")
    return matmul(s, t)


def kron(a, b):
    m, f = a.shape
    p, q = b.shape

    def vjp(g):
        blocks = g.reshape(m, p, f, q)
        ga = np.einsum("apbq,pq->ab", blocks, b.value) if a.requires_grad else None
        gb = np.einsum("apbq,ab->pq", blocks, a.value) if b.requires_grad else None
        return ga, gb

    return primitive("kron", backend.kron(a.value, b.value), (a, b), vjp)


# -- nonlinearities and losses -----------------------------------------------------

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact GeLU, x * Phi(x)."""
    v = x.value
    cdf = 0.5 * (1.0 + erf(v / _SQRT2))

    def vjp(g):
        return (g * (cdf + v * _INV_SQRT_2PI * np.exp(-0.5 * v * v)),)

    return primitive("gelu", v * cdf, (x,), vjp)


def layer_norm(x, gain, bias=None, eps=LN_EPS):
    v = x.value
    if v.shape[-1] == 0:
        raise ValueError("layer_norm over an empty dimension")
    mu = v.mean(axis=-1, keepdims=True)
    centered = v - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gain.value
    if bias is not None:
        out = out + bias.value

    def vjp(g):
        gxhat = g * gain.value
        gx = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.shape)
        if bias is None:
            return gx, ggain
        return gx, ggain, _unbroadcast(g, bias.shape)

    parents = (x, gain) if bias is None else (x, gain, bias)
    return primitive("layer_norm", out, parents, vjp)


def softmax(x):
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return primitive("softmax", y, (x,), vjp)


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    z = logits.value
    targets = np.asarray(targets)
    rows = np.arange(z.shape[0])
    shifted = z - z.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1))
    nll = log_norm - shifted[rows, targets]
    loss = np.asarray(nll.mean(), dtype=z.dtype).reshape(1, 1)

    def vjp(g):
        p = np.exp(shifted - log_norm[:, None])
        p[rows, targets] -= 1.0
        return (p * (g.reshape(()) / z.shape[0]),)

    return primitive("cross_entropy", loss, (logits,), vjp)


def embedding(table, ids):
    ids = np.asarray(ids)

    def vjp(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return primitive("embedding", table.value[ids], (table,), vjp)
