"""Adapter, PHM, low-rank PHM and Compacter layers.

Activations are row vectors: every projection computes ``y = x @ W + b`` with
``W`` of shape (k, d). A PHM weight is ``W = sum_i kron(A_i, B_i)`` with
``A_i`` (n, n) and ``B_i`` (k/n, d/n); in low-rank mode ``B_i = s_i @ t_i``
with ``s_i`` (k/n, r) and ``t_i`` (r, d/n). The A-set and B-set are stored
stacked as (n, n, n) and (n, k/n, d/n) arrays.
"""

from dataclasses import dataclass

import numpy as np

from kpft import backend, grad
from kpft.grad import Var

KINDS = ("dense", "lowrank", "phm", "compacter")
PLACEMENTS = ("after_attn_and_ffn", "after_ffn_only", "after_attn_only")


class LayerConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AdapterSpec:
    kind: str = "compacter"
    bottleneck: int = 8
    n: int = 2
    rank: int = 1
    placement: str = "after_attn_and_ffn"
    drop_first_m: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise LayerConfigError(f"adapter kind must be one of {KINDS}, got {self.kind!r}")
        if self.placement not in PLACEMENTS:
            raise LayerConfigError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")
        if self.bottleneck < 1 or self.n < 1 or self.rank < 1 or self.drop_first_m < 0:
            raise LayerConfigError("bottleneck, n and rank must be >= 1 and drop_first_m >= 0")

    @property
    def positions(self):
        return {
            "after_attn_and_ffn": ("attn", "ffn"),
            "after_ffn_only": ("ffn",),
            "after_attn_only": ("attn",),
        }[self.placement]

    def check(self, k, layers=None):
        """Raise LayerConfigError if this spec cannot be placed in a width-k, L-layer model."""
        d, n, r = self.bottleneck, self.n, self.rank
        if layers is not None and self.drop_first_m >= layers:
            raise LayerConfigError(f"drop_first_m={self.drop_first_m} must be < layers={layers}")
        if self.kind in ("phm", "compacter"):
            if k % n or d % n:
                raise LayerConfigError(
                    f"hidden size k={k} and bottleneck d={d} must both be divisible by n={n}")
            if self.kind == "compacter" and r > min(k // n, d // n):
                raise LayerConfigError(f"rank r={r} exceeds min(k/n, d/n)={min(k // n, d // n)}")
        if self.kind == "lowrank" and r > min(k, d):
            raise LayerConfigError(f"rank r={r} exceeds min(k, d)={min(k, d)}")


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _param(value, name=None):
    return Var(np.ascontiguousarray(value), requires_grad=True, name=name)


# -- projections -------------------------------------------------------------------

class DenseProjection:
    def __init__(self, weight, bias):
        self.weight = weight
        self.bias = bias

    def apply(self, x):
        return grad.matmul(x, self.weight) + self.bias

    def materialize(self):
        return self.weight

    def named_parameters(self):
        return {"weight": self.weight, "bias": self.bias}


class LowRankProjection:
    """W = s @ t with s (k, r) and t (r, d)."""

    def __init__(self, s, t, bias):
        self.s = s
        self.t = t
        self.bias = bias

    def apply(self, x):
        return grad.matmul(grad.matmul(x, self.s), self.t) + self.bias

    def materialize(self):
        return grad.outer(self.s, self.t)

    def named_parameters(self):
        return {"s": self.s, "t": self.t, "bias": self.bias}


class PhmFactors:
    """Factors of one PHM (``b`` given) or LPHM (``s`` and ``t`` given) projection."""

    def __init__(self, a, bias, b=None, s=None, t=None, shared_a=False):
        if (b is None) == (s is None or t is None):
            raise LayerConfigError("give either b (PHM) or both s and t (LPHM)")
        self.a = a
        self.b = b
        self.s = s
        self.t = t
        self.bias = bias
        self.shared_a = shared_a
        n = a.shape[0]
        if a.shape != (n, n, n):
            raise LayerConfigError(f"A-set must have shape (n, n, n), got {a.shape}")
        if b is not None:
            if b.shape[0] != n:
                raise LayerConfigError(f"B-set has {b.shape[0]} matrices, expected n={n}")
            p, q = b.shape[1:]
        else:
            if s.shape[0] != n or t.shape[0] != n or s.shape[2] != t.shape[1]:
                raise LayerConfigError(f"bad LPHM factor shapes s={s.shape} t={t.shape}")
            p, q, r = s.shape[1], t.shape[2], s.shape[2]
            if not 1 <= r <= min(p, q):
                raise LayerConfigError(f"rank r={r} must lie in [1, min(k/n, d/n)={min(p, q)}]")
        if bias.shape != (n * q,):
            raise LayerConfigError(f"bias shape {bias.shape} does not match d={n * q}")

    @property
    def n(self):
        return self.a.shape[0]

    @property
    def k(self):
        return self.n * (self.b.shape[1] if self.b is not None else self.s.shape[1])

    @property
    def d(self):
        return self.n * (self.b.shape[2] if self.b is not None else self.t.shape[2])

    @property
    def low_rank(self):
        return self.b is None

    @property
    def rank(self):
        return self.s.shape[2] if self.low_rank else None

    def b_set(self):
        """The B-set as a Var: stored directly, or s_i @ t_i in low-rank mode."""
        return self.b if self.b is not None else grad.outer(self.s, self.t)

    def apply(self, x):
        return phm_apply(self, x)

    def materialize(self):
        return materialize_w(self)

    def named_parameters(self):
        params = {"a": self.a}
        if self.low_rank:
            params.update(s=self.s, t=self.t)
        else:
            params["b"] = self.b
        params["bias"] = self.bias
        return params


def materialize_w(f):
    """Dense (k, d) weight ``sum_i kron(A_i, B_i)`` as a Var."""
    b_set = f.b_set()
    w = None
    for i in range(f.n):
        term = grad.kron(grad.take(f.a, i), grad.take(b_set, i))
        w = term if w is None else w + term
    return w


def _phm_product(a, b, x):
    lead, k = x.shape[:-1], x.shape[-1]
    d = a.shape[0] * b.shape[2]
    if k != a.shape[0] * b.shape[1]:
        raise LayerConfigError(f"input width {k} does not match PHM input dimension {a.shape[0] * b.shape[1]}")
    x2 = x.value.reshape(-1, k)
    y = backend.phm_forward(a.value, b.value, x2).reshape(*lead, d)

    def vjp(g):
        ga, gb, gx = backend.phm_backward(a.value, b.value, x2, g.reshape(-1, d))
        return ga, gb, gx.reshape(x.shape)

    return grad.primitive("phm", y, (a, b, x), vjp)


def phm_apply(f, x):
    """``x @ materialize_w(f) + bias`` computed blockwise, without the (k, d) weight."""
    return _phm_product(f.a, f.b_set(), x) + f.bias


# -- adapters ------------------------------------------------------------------------

class Adapter:
    """Bottleneck residual block: up(GeLU(down(x))) + x."""

    def __init__(self, spec, down, up):
        self.spec = spec
        self.down = down
        self.up = up

    def __call__(self, x):
        return adapter_forward(self, x)

    @property
    def width(self):
        p = self.down
        if isinstance(p, DenseProjection):
            return p.weight.shape[0]
        if isinstance(p, LowRankProjection):
            return p.s.shape[0]
        return p.k

    def named_parameters(self):
        out = {}
        for prefix, proj in (("down", self.down), ("up", self.up)):
            for name, var in proj.named_parameters().items():
                if isinstance(proj, PhmFactors) and name == "a" and proj.shared_a:
                    continue
                out[f"{prefix}.{name}"] = var
        return out


def adapter_forward(adapter, x):
    if x.shape[-1] != adapter.width:
        raise LayerConfigError(f"adapter expects hidden size {adapter.width}, got {x.shape[-1]}")
    return adapter.up.apply(grad.gelu(adapter.down.apply(x))) + x


def adapter_shapes(spec, k):
    """(name, shape, role) for each tensor one adapter instance owns.

    role is ``adapter`` for weights and ``adapter_bias`` for biases. The shared
    Compacter A-set is not included (see :func:`shared_shapes`).
    """
    d, n, r = spec.bottleneck, spec.n, spec.rank
    out = []
    for prefix, fan_in, fan_out in (("down", k, d), ("up", d, k)):
        if spec.kind == "dense":
            out.append((f"{prefix}.weight", (fan_in, fan_out), "adapter"))
        elif spec.kind == "lowrank":
            out += [(f"{prefix}.s", (fan_in, r), "adapter"), (f"{prefix}.t", (r, fan_out), "adapter")]
        elif spec.kind == "phm":
            out += [(f"{prefix}.a", (n, n, n), "adapter"),
                    (f"{prefix}.b", (n, fan_in // n, fan_out // n), "adapter")]
        else:
            out += [(f"{prefix}.s", (n, fan_in // n, r), "adapter"),
                    (f"{prefix}.t", (n, r, fan_out // n), "adapter")]
        out.append((f"{prefix}.bias", (fan_out,), "adapter_bias"))
    return out


def shared_shapes(spec):
    if spec.kind == "compacter":
        return [("phm_a", (spec.n, spec.n, spec.n), "adapter_shared")]
    return []


def slow_weight_std(n, low_rank):
    """A-set std that gives the materialized W the variance of a dense uniform init.

    Var(W) = n Var(A) Var(B). With B uniform on fan_in/n that is Var(A) = 1/n^2;
    a rank-r product s @ t has a third of that variance, hence 3/n^2.
    """
    return (3.0 ** 0.5 if low_rank else 1.0) / n


def new_shared_a(spec, rng, dtype=np.float64):
    n = spec.n
    a = rng.normal(0.0, slow_weight_std(n, low_rank=True), size=(n, n, n))
    return _param(a.astype(dtype), "phm_a")


def new_adapter(spec, k, rng, shared_a=None, dtype=np.float64):
    """Fresh adapter whose up-projection fast weights are zero, so it starts as the identity."""
    spec.check(k)
    d, n, r = spec.bottleneck, spec.n, spec.rank
    projections = []
    for fan_in, fan_out, is_up in ((k, d, False), (d, k, True)):
        bias = _param(np.zeros(fan_out, dtype=dtype))
        if spec.kind == "dense":
            w = np.zeros((fan_in, fan_out), dtype) if is_up else _uniform(rng, (fan_in, fan_out), fan_in, dtype)
            projections.append(DenseProjection(_param(w), bias))
        elif spec.kind == "lowrank":
            s = _uniform(rng, (fan_in, r), fan_in, dtype)
            t = np.zeros((r, fan_out), dtype) if is_up else _uniform(rng, (r, fan_out), r, dtype)
            projections.append(LowRankProjection(_param(s), _param(t), bias))
        elif spec.kind == "phm":
            a = rng.normal(0.0, slow_weight_std(n, low_rank=False), size=(n, n, n)).astype(dtype)
            shape = (n, fan_in // n, fan_out // n)
            b = np.zeros(shape, dtype) if is_up else _uniform(rng, shape, fan_in // n, dtype)
            projections.append(PhmFactors(_param(a), bias, b=_param(b)))
        else:
            if shared_a is None:
                raise LayerConfigError("compacter adapters need the shared A-set")
            s = _uniform(rng, (n, fan_in // n, r), fan_in // n, dtype)
            t_shape = (n, r, fan_out // n)
            t = np.zeros(t_shape, dtype) if is_up else _uniform(rng, t_shape, r, dtype)
            projections.append(PhmFactors(shared_a, bias, s=_param(s), t=_param(t), shared_a=True))
    return Adapter(spec, *projections)


def make_shared_slow_weights(n, layer_handles):
    """Point every PHM projection in ``layer_handles`` at one A-set and return it.

    The first handle's A-set becomes the shared one. Fast weights (B, or s and
    t) stay per projection.
    """
    handles = list(layer_handles)
    if not handles:
        raise LayerConfigError("no layers to share slow weights across")
    bad = sorted({h.n for h in handles if h.n != n})
    if bad:
        raise LayerConfigError(f"all layers must have n={n}; found n in {bad}")
    shared = handles[0].a
    for h in handles:
        h.a = shared
        h.shared_a = True
    return shared
