"""Closed-form trainable-parameter counts and their reconciliation with the model.

The closed forms count adapter weights only (no biases, no layer norms), with
``L`` the total number of transformer layers (encoder plus decoder) and two
adapters per layer:

    adapter     2L(2kd)
    PHM         4L(kd/n + n^3)
    Compacter   4L(k + d) + n^3        (one adapter per layer: 2L(k + d) + n^3)

:func:`audit` counts the same quantities by walking the model manifest and
reports both. The traversal is the ground truth; the literal formula is
reported next to it with a flag saying whether they agree.
"""

from dataclasses import asdict, dataclass, field

from kpft import layers, model as model_mod
from kpft.layers import AdapterSpec

WEIGHT_ROLES = ("adapter", "adapter_shared")
BIAS_ROLES = ("adapter_bias", "bias", "head_bias")
NORM_ROLES = ("norm_gain", "norm_bias")


class BudgetError(ValueError):
    pass


def _check_div(k, d, n):
    if n < 1 or k % n or d % n:
        raise BudgetError(f"k={k} and d={d} must both be divisible by n={n}")


def per_adapter_dense(k, d):
    return 2 * k * d


def per_adapter_lowrank(k, d, r=1):
    return 2 * r * (k + d)


def per_adapter_phm(k, d, n):
    _check_div(k, d, n)
    return 2 * (k * d // n + n ** 3)


def per_adapter_compacter(k, d, n, r=1):
    """Fast weights of one Compacter adapter; the shared n^3 is not included."""
    _check_div(k, d, n)
    return 2 * n * r * (k // n + d // n)


def closed_form_adapter(L, k, d):
    return 2 * L * (2 * k * d)


def closed_form_phm(L, k, d, n):
    _check_div(k, d, n)
    return 4 * L * (k * d // n + n ** 3)


def closed_form_compacter(L, k, d, n, adapters_per_layer=2):
    _check_div(k, d, n)
    return 2 * adapters_per_layer * L * (k + d) + n ** 3


def kd_dominates(k, d, n):
    """True when kd > n^4, i.e. the kd/n term outweighs n^3 in a PHM layer."""
    return k * d > n ** 4


# -- methods -----------------------------------------------------------------------

@dataclass(frozen=True)
class Method:
    name: str
    kind: str | None  # None: no adapters
    placement: str = "after_attn_and_ffn"
    drop_first_m: int = 0
    mode: str = "standard"


METHODS = {
    "dense": Method("dense", "dense"),
    "lowrank": Method("lowrank", "lowrank"),
    "phm": Method("phm", "phm"),
    "compacter": Method("compacter", "compacter"),
    "compacter++": Method("compacter++", "compacter", placement="after_ffn_only"),
    "bitfit": Method("bitfit", None, mode="bitfit"),
    "pfeiffer": Method("pfeiffer", "dense", placement="after_attn_only"),
    "adapterdrop": Method("adapterdrop", "dense", drop_first_m=5),
}
TABLE_METHODS = ("dense", "lowrank", "phm", "compacter", "compacter++", "bitfit")


def method_spec(method, base):
    """AdapterSpec for ``method`` taking bottleneck, n and rank from ``base``."""
    m = METHODS[method] if isinstance(method, str) else method
    if m.kind is None:
        return None
    return AdapterSpec(kind=m.kind, bottleneck=base.bottleneck, n=base.n, rank=base.rank,
                       placement=m.placement, drop_first_m=m.drop_first_m)


# -- audit -----------------------------------------------------------------------------

@dataclass
class ParamBudgetReport:
    method: str
    counted_trainable: int
    closed_form: int
    total_model: int  # pretrained model only; adapters are not in the denominator
    fraction_counted: float
    fraction_closed_form: float
    breakdown: dict = field(default_factory=dict)
    adapter_instances: int = 0
    counted_adapter_weights: int = 0
    literal_closed_form: int | None = None
    literal_matches: bool | None = None
    block_norm_share: float = 0.0

    def lines(self, fmt=lambda x: format(x, ".9g")):
        yield (f"method={self.method} counted_trainable={self.counted_trainable} "
               f"closed_form={self.closed_form} total_model={self.total_model} "
               f"fraction_counted={fmt(100 * self.fraction_counted)}% "
               f"fraction_closed_form={fmt(100 * self.fraction_closed_form)}%")
        shares = " ".join(f"{k}={fmt(100 * v)}%" for k, v in self.breakdown.items())
        literal = "n/a" if self.literal_closed_form is None else self.literal_closed_form
        yield (f"method={self.method} adapter_instances={self.adapter_instances} "
               f"counted_adapter_weights={self.counted_adapter_weights} literal_closed_form={literal} "
               f"{shares} block_norm_share={fmt(100 * self.block_norm_share)}%")

    def record(self):
        """Flat mapping for the key = value record format."""
        out = {k: v for k, v in asdict(self).items() if k != "breakdown"}
        out.update(self.breakdown)
        return out


def _literal(spec, geometry):
    """The textbook closed-form count for this placement, or None when none applies."""
    if spec is None or spec.drop_first_m:
        return None
    L, k, d, n = geometry.total_layers, geometry.hidden, spec.bottleneck, spec.n
    per_layer = len(spec.positions)
    if spec.kind == "dense":
        return per_layer * L * per_adapter_dense(k, d)
    if spec.kind == "phm":
        return per_layer * L * per_adapter_phm(k, d, n)
    if spec.kind == "compacter" and spec.rank == 1:
        return closed_form_compacter(L, k, d, n, adapters_per_layer=per_layer)
    if spec.kind == "lowrank":
        return per_layer * L * per_adapter_lowrank(k, d, spec.rank)
    return None


def _per_adapter(spec, k):
    d, n, r = spec.bottleneck, spec.n, spec.rank
    return {
        "dense": lambda: per_adapter_dense(k, d),
        "lowrank": lambda: per_adapter_lowrank(k, d, r),
        "phm": lambda: per_adapter_phm(k, d, n),
        "compacter": lambda: per_adapter_compacter(k, d, n, r),
    }[spec.kind]()


def base_parameters(geometry):
    """Parameter count of the frozen model with no adapters and no added biases."""
    return sum(e.size for e in model_mod.manifest(geometry))


def count_trainable(geometry, spec=None, mode="standard"):
    return sum(e.size for e in model_mod.manifest(geometry, spec, mode) if model_mod.is_trainable(e, mode))


def audit(geometry, spec=None, mode="standard", method=None):
    entries = model_mod.manifest(geometry, spec, mode)
    if mode == "bitfit":
        spec = None
    trainable = [e for e in entries if model_mod.is_trainable(e, mode)]
    counted = sum(e.size for e in trainable)
    # fractions are taken against the pretrained model alone
    total = base_parameters(geometry)
    weights = sum(e.size for e in trainable if e.role in WEIGHT_ROLES)
    biases = sum(e.size for e in trainable if e.role in BIAS_ROLES)
    norms = sum(e.size for e in trainable if e.role in NORM_ROLES)
    block_norms = sum(e.size for e in trainable if e.role in NORM_ROLES and ".ln_final." not in e.path)
    instances = len({e.path.rsplit(".", 2)[0] for e in entries if e.role == "adapter"})

    if spec is None:
        closed = 0
    else:
        closed = instances * _per_adapter(spec, geometry.hidden)
        closed += sum(shape[0] * shape[1] * shape[2] for _, shape, _ in layers.shared_shapes(spec))
    literal = _literal(spec, geometry)
    denom = counted or 1
    return ParamBudgetReport(
        method=method or (spec.kind if spec else mode),
        counted_trainable=counted,
        closed_form=closed,
        total_model=total,
        fraction_counted=counted / total,
        fraction_closed_form=closed / total,
        breakdown={
            "layer_norm_share": norms / denom,
            "bias_share": biases / denom,
            "weight_share": weights / denom,
        },
        adapter_instances=instances,
        counted_adapter_weights=weights,
        literal_closed_form=literal,
        literal_matches=None if literal is None else literal == weights,
        block_norm_share=block_norms / denom,
    )


def audit_method(geometry, method, base_spec):
    m = METHODS[method]
    return audit(geometry, method_spec(m, base_spec), m.mode, method=m.name)
