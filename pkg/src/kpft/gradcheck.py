"""Finite-difference checks for every differentiable op and the adapter layers.

Each check draws random inputs, reduces the op's output to a scalar with a
fixed random projection ``sum(out * R)`` and compares the tape gradient with
fourth-order central differences. The error is norm-wise:

    ||g_tape - g_fd|| / max(||g_tape||, ||g_fd||, 1e-12)

which stays meaningful when individual gradient entries are near zero.
"""

from dataclasses import dataclass

import numpy as np

from kpft import grad, layers, rng
from kpft.grad import Var
from kpft.layers import AdapterSpec, PhmFactors

GRAD_TOL = 1e-5
MATERIALIZE_TOL = 1e-12
DEFAULT_TRIALS = 50


@dataclass
class CheckResult:
    op: str
    trials: int
    max_rel_err: float
    worst_input: str  # "<input>[index]" of the largest elementwise gap in the worst trial
    tol: float

    @property
    def ok(self):
        return self.max_rel_err < self.tol

    def line(self):
        status = "ok" if self.ok else "FAIL"
        return (f"{status} op={self.op} trials={self.trials} max_rel_err={self.max_rel_err:.3e} "
                f"worst={self.worst_input} tol={self.tol:.0e}")


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def _leaf(gen, shape, low=-1.0, high=1.0):
    return Var(gen.uniform(low, high, size=shape), requires_grad=True)


def _signed(gen, shape):
    """Entries of magnitude in [0.25, 1] with random sign; keeps products away from zero."""
    return gen.uniform(0.25, 1.0, size=shape) * gen.choice([-1.0, 1.0], size=shape)


def numeric_grad(f, var, step=1e-3, order=4):
    """Central differences of scalar ``f()`` with respect to ``var.value``.

    ``order=4`` uses (8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h, whose
    O(h^4) truncation error allows a wide step and so little roundoff.
    ``order=2`` is the plain (f(x+h) - f(x-h)) / 2h. The step is scaled by
    max(1, |x|) per element. ``var.value`` is perturbed in place and restored.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    offsets = (1.0, -1.0) if order == 2 else (2.0, 1.0, -1.0, -2.0)
    out = np.zeros_like(var.value)
    flat = var.value.reshape(-1)
    g = out.reshape(-1)
    for j in range(flat.size):
        x0 = flat[j]
        h = step * max(1.0, abs(x0))
        vals = []
        for offset in offsets:
            flat[j] = x0 + offset * h
            vals.append(f())
        flat[j] = x0
        if order == 2:
            g[j] = (vals[0] - vals[1]) / (2.0 * h)
        else:
            # paired differences are exactly zero where f is locally constant
            g[j] = (8.0 * (vals[1] - vals[2]) - (vals[0] - vals[3])) / (12.0 * h)
    return out


def check_once(build, gen):
    """One trial: ``build(gen)`` returns (fn, {name: Var}); fn() gives the output Var."""
    fn, inputs = build(gen)
    out_shape = fn().shape
    proj = gen.normal(size=out_shape)

    def scalar():
        return float(np.sum(fn().value * proj))

    with grad.Tape() as tape:
        loss = grad.total(grad.mul(fn(), Var(proj)))
    grad.backward(loss, tape)
    analytic = {name: v.grad.copy() for name, v in inputs.items()}

    worst, where = 0.0, ""
    for name, v in inputs.items():
        fd = numeric_grad(scalar, v)
        err = rel_err(analytic[name], fd)
        if err >= worst:
            idx = np.unravel_index(np.argmax(np.abs(analytic[name] - fd)), fd.shape)
            worst, where = err, f"{name}{list(int(i) for i in idx)}"
    return worst, where


# -- op builders ---------------------------------------------------------------------

def _dims(gen, low=1, high=4, count=1):
    return [int(x) for x in gen.integers(low, high + 1, size=count)]


def _matmul(gen):
    m, k, n = _dims(gen, count=3)
    a, b = _leaf(gen, (m, k)), _leaf(gen, (k, n))
    return (lambda: grad.matmul(a, b)), {"a": a, "b": b}


def _kron(gen):
    m, f, p, q = _dims(gen, high=3, count=4)
    a, b = _leaf(gen, (m, f)), _leaf(gen, (p, q))
    return (lambda: grad.kron(a, b)), {"a": a, "b": b}


def _sum_of_kron(gen):
    n = int(gen.integers(1, 4))
    p, q = _dims(gen, high=3, count=2)
    a, b = _leaf(gen, (n, n, n)), _leaf(gen, (n, p, q))
    f = PhmFactors(a, Var(np.zeros(n * q)), b=b)
    return (lambda: layers.materialize_w(f)), {"a": a, "b": b}


def _outer(gen):
    p, r, q = _dims(gen, count=3)
    s, t = _leaf(gen, (p, r)), _leaf(gen, (r, q))
    return (lambda: grad.outer(s, t)), {"s": s, "t": t}


def _gelu(gen):
    x = _leaf(gen, tuple(_dims(gen, count=2)), -3.0, 3.0)
    return (lambda: grad.gelu(x)), {"x": x}


def _layer_norm(gen):
    # width 2 normalizes to +-1 whatever x is, leaving an x-gradient of order eps
    rows, k = _dims(gen, count=1)[0], int(gen.integers(3, 8))
    x = _leaf(gen, (rows, k), -2.0, 2.0)
    gain, bias = _leaf(gen, (k,)), _leaf(gen, (k,))
    return (lambda: grad.layer_norm(x, gain, bias)), {"x": x, "gain": gain, "bias": bias}


def _softmax(gen):
    x = _leaf(gen, tuple(_dims(gen, count=2)), -3.0, 3.0)
    return (lambda: grad.softmax(x)), {"x": x}


def _cross_entropy(gen):
    rows, classes = _dims(gen, count=1)[0], int(gen.integers(2, 6))
    z = _leaf(gen, (rows, classes), -3.0, 3.0)
    targets = gen.integers(0, classes, size=rows)
    return (lambda: grad.cross_entropy(z, targets)), {"logits": z}


def _phm_factors(gen, low_rank, high=3):
    n = int(gen.choice([1, 2, 4]))
    p, q = _dims(gen, high=high, count=2)
    a, bias = _leaf(gen, (n, n, n)), _leaf(gen, (n * q,))
    if low_rank:
        r = int(gen.integers(1, min(p, q) + 1))
        s, t = _leaf(gen, (n, p, r)), _leaf(gen, (n, r, q))
        return PhmFactors(a, bias, s=s, t=t), {"a": a, "s": s, "t": t, "bias": bias}
    b = _leaf(gen, (n, p, q))
    return PhmFactors(a, bias, b=b), {"a": a, "b": b, "bias": bias}


def _phm(gen, low_rank=False):
    f, inputs = _phm_factors(gen, low_rank)
    x = _leaf(gen, (int(gen.integers(1, 4)), f.k))
    inputs["x"] = x
    return (lambda: layers.phm_apply(f, x)), inputs


def _adapter(kind):
    def build(gen):
        n = int(gen.choice([1, 2]))
        k, d = n * int(gen.integers(1, 4)), n * int(gen.integers(1, 3))
        spec = AdapterSpec(kind=kind, bottleneck=d, n=n)
        shared = layers.new_shared_a(spec, gen) if kind == "compacter" else None
        adapter = layers.new_adapter(spec, k, gen, shared)
        inputs = dict(adapter.named_parameters())
        if shared is not None:
            inputs["shared_a"] = shared
        # identity init would zero most gradients; move off it
        for v in inputs.values():
            v.value[...] = _signed(gen, v.shape)
        x = _leaf(gen, (int(gen.integers(1, 4)), k))
        inputs["x"] = x
        return (lambda: adapter(x)), inputs
    return build


def _compacter_shared(gen):
    """Two stacked Compacter adapters drawing on one A-set."""
    n = int(gen.choice([1, 2]))
    k, d = n * int(gen.integers(1, 3)), n * int(gen.integers(1, 3))
    spec = AdapterSpec(kind="compacter", bottleneck=d, n=n)
    shared = layers.new_shared_a(spec, gen)
    first = layers.new_adapter(spec, k, gen, shared)
    second = layers.new_adapter(spec, k, gen, shared)
    inputs = {"shared_a": shared}
    for tag, adapter in (("l0", first), ("l1", second)):
        for name, v in adapter.named_parameters().items():
            inputs[f"{tag}.{name}"] = v
    for v in inputs.values():
        v.value[...] = _signed(gen, v.shape)
    x = _leaf(gen, (int(gen.integers(1, 3)), k))
    inputs["x"] = x
    return (lambda: second(first(x))), inputs


CHECKS = {
    "matmul": _matmul,
    "kron": _kron,
    "sum_of_kron": _sum_of_kron,
    "outer": _outer,
    "gelu": _gelu,
    "layer_norm": _layer_norm,
    "softmax": _softmax,
    "cross_entropy": _cross_entropy,
    "phm": _phm,
    "lphm": lambda gen: _phm(gen, low_rank=True),
    "adapter_dense": _adapter("dense"),
    "adapter_lowrank": _adapter("lowrank"),
    "adapter_phm": _adapter("phm"),
    "compacter": _adapter("compacter"),
    "compacter_shared": _compacter_shared,
}


def run_gradchecks(ops=None, trials=DEFAULT_TRIALS, seed=0, registry=None):
    registry = CHECKS if registry is None else registry
    names = list(registry) if ops is None else list(ops)
    unknown = [n for n in names if n not in registry]
    if unknown:
        raise KeyError(f"unknown op(s) {unknown}; choose from {sorted(registry)}")
    results = []
    for op_id, name in enumerate(names):
        gen = rng.stream(seed, rng.PROBE, op_id)
        worst, where = 0.0, ""
        for _ in range(trials):
            err, at = check_once(registry[name], gen)
            if err >= worst:
                worst, where = err, at
        results.append(CheckResult(name, trials, worst, where, GRAD_TOL))
    return results


# -- materialization -----------------------------------------------------------------

def materialize_trial(gen):
    """Blockwise vs materialized PHM, and LPHM vs PHM with B = s @ t; returns both errors."""
    f, _ = _phm_factors(gen, low_rank=True, high=6)
    x = gen.normal(size=(int(gen.integers(1, 6)), f.k))
    xv = Var(x)
    direct = layers.phm_apply(f, xv).value
    dense = x @ layers.materialize_w(f).value + f.bias.value
    b = np.matmul(f.s.value, f.t.value)
    phm = PhmFactors(f.a, f.bias, b=Var(b))
    plain = layers.phm_apply(phm, xv).value
    return rel_err(direct, dense), rel_err(direct, plain)


def run_materialize_checks(trials=200, seed=0):
    gen = rng.stream(seed, rng.PROBE, 1000)
    worst_dense = worst_lowrank = 0.0
    for _ in range(trials):
        a, b = materialize_trial(gen)
        worst_dense, worst_lowrank = max(worst_dense, a), max(worst_lowrank, b)
    return [
        CheckResult("phm_vs_materialized", trials, worst_dense, "-", MATERIALIZE_TOL),
        CheckResult("lphm_vs_phm", trials, worst_lowrank, "-", MATERIALIZE_TOL),
    ]
