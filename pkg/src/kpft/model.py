"""A small frozen transformer encoder with adapter insertion points.

Blocks are pre-norm: ``h + adapter(attn(LN(h)))`` then
``h + adapter(ffn(LN(h)))``. The encoder output is layer-normed, mean-pooled
over the sequence and passed through a frozen linear head.

The parameter layout is described by :func:`manifest`, which needs no memory
for the weights themselves; parameter budgets at T5-base scale are computed from
it directly. :func:`build` allocates exactly the manifest.
"""

import copy
from dataclasses import dataclass

import numpy as np

from kpft import grad, layers, rng
from kpft.grad import Var

MODES = ("standard", "bitfit")

TRAINABLE_ROLES = {
    # adapters and layer norms; everything else stays frozen
    "standard": frozenset({"norm_gain", "norm_bias", "adapter", "adapter_bias", "adapter_shared"}),
    # bias vectors only
    "bitfit": frozenset({"bias", "norm_bias", "head_bias"}),
}


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelGeometry:
    layers: int = 2
    decoder_layers: int = 0
    hidden: int = 32
    ffn: int = 64
    heads: int = 4
    vocab: int = 16
    max_seq: int = 8
    classes: int = 2
    linear_bias: bool = True
    norm_bias: bool = True
    relative_buckets: int = 0
    tied_head: bool = False

    def __post_init__(self):
        for name in ("layers", "hidden", "ffn", "heads", "vocab", "max_seq"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.decoder_layers < 0 or self.relative_buckets < 0:
            raise ModelError("decoder_layers and relative_buckets must be >= 0")
        if not self.tied_head and self.classes < 1:
            raise ModelError("an untied head needs classes >= 1")
        if self.hidden % self.heads:
            raise ModelError(f"hidden={self.hidden} must be divisible by heads={self.heads}")

    @property
    def total_layers(self):
        return self.layers + self.decoder_layers


# Encoder-decoder T5-base: shared input/output embedding, RMS-style norms with
# no bias, no linear biases, 32 relative-position buckets per stack.
T5_BASE = ModelGeometry(
    layers=12, decoder_layers=12, hidden=768, ffn=3072, heads=12, vocab=32128,
    max_seq=512, classes=0, linear_bias=False, norm_bias=False, relative_buckets=32,
    tied_head=True,
)


@dataclass(frozen=True)
class ParamEntry:
    path: str
    shape: tuple
    role: str

    @property
    def size(self):
        return int(np.prod(self.shape, dtype=np.int64))


def manifest(geometry, spec=None, mode="standard"):
    """Every parameter tensor of the model as (path, shape, role), in build order.

    BitFit mode adds any bias the geometry lacks (linear layers, norms, output
    head) and places no adapters.
    """
    if mode not in MODES:
        raise ModelError(f"mode must be one of {MODES}, got {mode!r}")
    g = geometry
    k = g.hidden
    if mode == "bitfit":
        spec = None
    if spec is not None:
        spec.check(k, g.layers)
    linear_bias = g.linear_bias or mode == "bitfit"
    norm_bias = g.norm_bias or mode == "bitfit"
    out = []

    def linear(prefix, fan_in, fan_out):
        out.append(ParamEntry(f"{prefix}.weight", (fan_in, fan_out), "weight"))
        if linear_bias:
            out.append(ParamEntry(f"{prefix}.bias", (fan_out,), "bias"))

    def norm(prefix):
        out.append(ParamEntry(f"{prefix}.gain", (k,), "norm_gain"))
        if norm_bias:
            out.append(ParamEntry(f"{prefix}.bias", (k,), "norm_bias"))

    def attention(prefix):
        for proj in ("q", "k", "v", "o"):
            linear(f"{prefix}.{proj}", k, k)

    out.append(ParamEntry("embed.token", (g.vocab, k), "embedding"))
    if not g.relative_buckets:
        out.append(ParamEntry("embed.position", (g.max_seq, k), "embedding"))
    for stack, depth, cross in (("enc", g.layers, False), ("dec", g.decoder_layers, True)):
        if depth == 0:
            continue
        if g.relative_buckets:
            out.append(ParamEntry(f"{stack}.rel_bias", (g.relative_buckets, g.heads), "rel_bias"))
        for layer in range(depth):
            p = f"{stack}.{layer:02d}"
            norm(f"{p}.ln_attn")
            attention(f"{p}.attn")
            if cross:
                norm(f"{p}.ln_cross")
                attention(f"{p}.cross")
            norm(f"{p}.ln_ffn")
            linear(f"{p}.ffn.wi", k, g.ffn)
            linear(f"{p}.ffn.wo", g.ffn, k)
            if spec is not None and layer >= spec.drop_first_m:
                for pos in spec.positions:
                    for name, shape, role in layers.adapter_shapes(spec, k):
                        out.append(ParamEntry(f"{p}.adapter_{pos}.{name}", shape, role))
        norm(f"{stack}.ln_final")
    if not g.tied_head:
        out.append(ParamEntry("head.weight", (k, g.classes), "head_weight"))
    if (g.linear_bias and not g.tied_head) or mode == "bitfit":
        out.append(ParamEntry("head.bias", (g.vocab if g.tied_head else g.classes,), "head_bias"))
    if spec is not None:
        for name, shape, role in layers.shared_shapes(spec):
            out.append(ParamEntry(f"shared.{name}", shape, role))
    return out


def is_trainable(entry, mode):
    return entry.role in TRAINABLE_ROLES[mode]


def _base_init(entry, gen, dtype):
    if entry.role == "embedding":
        return gen.normal(0.0, 1.0, size=entry.shape)
    if entry.role in ("weight", "head_weight"):
        return gen.normal(0.0, 1.0 / np.sqrt(entry.shape[0]), size=entry.shape)
    if entry.role in ("bias", "rel_bias"):
        return gen.normal(0.0, 0.02, size=entry.shape)
    if entry.role == "norm_gain":
        return np.ones(entry.shape)
    return np.zeros(entry.shape)


class TransformerModel:
    def __init__(self, geometry, spec, mode, params, adapters, shared_a, dtype):
        self.geometry = geometry
        self.spec = spec
        self.mode = mode
        self.params = params
        self.adapters = adapters
        self.shared_a = shared_a
        self.dtype = dtype

    def __getitem__(self, path):
        return self.params[path]

    def __call__(self, token_ids):
        return forward(self, token_ids)

    def clone(self):
        """Independent copy; aliasing of the shared A-set is preserved inside the copy."""
        return copy.deepcopy(self)

    @property
    def num_parameters(self):
        return sum(v.value.size for v in self.params.values())

    def frozen_parameters(self):
        return sorted((p, v) for p, v in self.params.items() if not v.requires_grad)


def build(geometry, adapter_spec=None, seed=0, mode="standard", dtype=np.float64, trial=0):
    """Allocate a model; frozen weights depend only on (geometry, seed).

    Adapter weights come from a separate stream keyed by ``trial`` so adapter
    choices never change the frozen weights.
    """
    entries = manifest(geometry, adapter_spec, mode)
    spec = adapter_spec if mode != "bitfit" else None
    base_rng = rng.stream(seed, rng.MODEL_INIT)
    adapter_rng = rng.stream(seed, rng.ADAPTER_INIT, trial)

    shared_a = layers.new_shared_a(spec, adapter_rng, dtype) if spec and spec.kind == "compacter" else None
    params = {}
    adapters = {}
    for e in entries:
        if e.role in ("adapter", "adapter_bias", "adapter_shared"):
            continue
        params[e.path] = Var(np.ascontiguousarray(_base_init(e, base_rng, dtype), dtype=dtype), name=e.path)
    if spec is not None:
        for stack, depth in (("enc", geometry.layers), ("dec", geometry.decoder_layers)):
            for layer in range(spec.drop_first_m, depth):
                for pos in spec.positions:
                    prefix = f"{stack}.{layer:02d}.adapter_{pos}"
                    adapter = layers.new_adapter(spec, geometry.hidden, adapter_rng, shared_a, dtype)
                    adapters[prefix] = adapter
                    for name, var in adapter.named_parameters().items():
                        params[f"{prefix}.{name}"] = var
        if shared_a is not None:
            params["shared.phm_a"] = shared_a

    ordered = {}
    for e in entries:
        var = params[e.path]
        if var.shape != e.shape:
            raise ModelError(f"{e.path}: built shape {var.shape} differs from manifest {e.shape}")
        var.name = e.path
        var.requires_grad = is_trainable(e, mode)
        ordered[e.path] = var
    if len(ordered) != len(params):
        raise ModelError("built parameters and manifest disagree")
    return TransformerModel(geometry, spec, mode, ordered, adapters, shared_a, dtype)


def trainable_parameters(model):
    """(path, Var) for every trainable tensor, sorted by path; a shared tensor appears once."""
    return sorted((p, v) for p, v in model.params.items() if v.requires_grad)


# -- forward -----------------------------------------------------------------------

def _linear(model, prefix, x):
    y = grad.matmul(x, model.params[f"{prefix}.weight"])
    bias = model.params.get(f"{prefix}.bias")
    return y if bias is None else y + bias


def _norm(model, prefix, x):
    return grad.layer_norm(x, model.params[f"{prefix}.gain"], model.params.get(f"{prefix}.bias"))


def _attention(model, prefix, x):
    batch, seq, k = x.shape
    heads = model.geometry.heads
    dk = k // heads

    def split(name):
        y = grad.reshape(_linear(model, f"{prefix}.{name}", x), (batch, seq, heads, dk))
        return grad.transpose(y, (0, 2, 1, 3))

    q, key, v = split("q"), split("k"), split("v")
    scores = grad.scale(grad.matmul(q, grad.transpose(key, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
    ctx = grad.matmul(grad.softmax(scores), v)
    ctx = grad.reshape(grad.transpose(ctx, (0, 2, 1, 3)), (batch, seq, k))
    return _linear(model, f"{prefix}.o", ctx)


def _ffn(model, prefix, x):
    return _linear(model, f"{prefix}.wo", grad.gelu(_linear(model, f"{prefix}.wi", x)))


def forward(model, token_ids):
    """Class logits (batch, classes) for integer token ids (batch, seq)."""
    g = model.geometry
    if g.decoder_layers or g.relative_buckets or g.tied_head:
        raise ModelError("forward supports encoder-only geometries with absolute positions and an untied head")
    ids = np.asarray(token_ids)
    if ids.ndim != 2 or not np.issubdtype(ids.dtype, np.integer):
        raise ModelError(f"token ids must be a 2-D integer array, got {ids.dtype} {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= g.vocab):
        raise ModelError(f"token id out of vocabulary range [0, {g.vocab})")
    seq = ids.shape[1]
    if seq > g.max_seq:
        raise ModelError(f"sequence length {seq} exceeds max_seq={g.max_seq}")

    p = model.params
    h = grad.embedding(p["embed.token"], ids) + grad.embedding(p["embed.position"], np.arange(seq))
    for layer in range(g.layers):
        prefix = f"enc.{layer:02d}"
        for pos, block in (("attn", _attention), ("ffn", _ffn)):
            out = block(model, f"{prefix}.{pos}" if pos == "attn" else f"{prefix}.ffn",
                        _norm(model, f"{prefix}.ln_{pos}", h))
            adapter = model.adapters.get(f"{prefix}.adapter_{pos}")
            if adapter is not None:
                out = adapter(out)
            h = h + out
    h = _norm(model, "enc.ln_final", h)
    return _linear(model, "head", grad.mean(h, axis=1))
