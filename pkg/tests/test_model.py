import numpy as np
import pytest

from kpft import grad, layers
from kpft.grad import Tape
from kpft.layers import AdapterSpec
from kpft.model import T5_BASE, ModelError, ModelGeometry, build, forward, manifest, trainable_parameters
from kpft.train import OptimState, adamw_step

from conftest import SMALL


def ids(gen, batch=4, seq=5, vocab=6):
    return gen.integers(0, vocab, size=(batch, seq))


def test_same_seed_same_model():
    a, b = build(SMALL, AdapterSpec(n=2, bottleneck=4), seed=3), build(SMALL, AdapterSpec(n=2, bottleneck=4), seed=3)
    assert list(a.params) == list(b.params)
    for p in a.params:
        np.testing.assert_array_equal(a[p].value, b[p].value)


def test_frozen_weights_independent_of_adapter_choice():
    plain = build(SMALL, None, seed=5)
    for kind in layers.KINDS:
        m = build(SMALL, AdapterSpec(kind=kind, bottleneck=4, n=2), seed=5, trial=2)
        for path, v in plain.params.items():
            np.testing.assert_array_equal(m[path].value, v.value)


@pytest.mark.parametrize("kind", layers.KINDS)
@pytest.mark.parametrize("placement", layers.PLACEMENTS)
def test_identity_at_init(kind, placement, gen, kernel_backend):
    tokens = ids(gen)
    base = forward(build(SMALL, None, seed=1), tokens).value
    spec = AdapterSpec(kind=kind, bottleneck=4, n=2, placement=placement)
    adapted = forward(build(SMALL, spec, seed=1), tokens).value
    assert np.max(np.abs(adapted - base)) == 0.0


def test_identical_rows_and_batch_permutation(gen):
    model = build(SMALL, AdapterSpec(bottleneck=4, n=2), seed=2)
    row = ids(gen, batch=1)
    out = forward(model, np.repeat(row, 3, axis=0)).value
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])
    tokens = ids(gen, batch=6)
    perm = gen.permutation(6)
    np.testing.assert_allclose(forward(model, tokens[perm]).value, forward(model, tokens).value[perm],
                               rtol=1e-13, atol=1e-13)


def test_forward_input_errors(gen):
    model = build(SMALL, None)
    with pytest.raises(ModelError):
        forward(model, np.full((1, 3), 6))
    with pytest.raises(ModelError):
        forward(model, np.zeros((1, 6), dtype=int))
    with pytest.raises(ModelError):
        forward(model, np.zeros(3, dtype=int))


def test_forward_needs_encoder_only():
    geometry = ModelGeometry(layers=1, decoder_layers=1, hidden=8, heads=2, vocab=4, max_seq=3)
    with pytest.raises(ModelError):
        forward(build(geometry, None), np.zeros((1, 2), dtype=int))


def test_geometry_validation():
    with pytest.raises(ModelError):
        ModelGeometry(hidden=10, heads=4)
    with pytest.raises(ModelError):
        ModelGeometry(layers=0)


def test_dense_adapter_trains_no_base_weights():
    model = build(SMALL, AdapterSpec(kind="dense", bottleneck=4))
    paths = [p for p, _ in trainable_parameters(model)]
    assert not any(".attn." in p or ".ffn." in p for p in paths)
    assert all(".adapter_" in p or ".ln_" in p for p in paths)


def test_bitfit_trains_vectors():
    model = build(SMALL, None, mode="bitfit")
    params = trainable_parameters(model)
    assert params and all(v.value.ndim == 1 for _, v in params)


def test_shared_a_listed_once():
    model = build(SMALL, AdapterSpec(kind="compacter", bottleneck=4, n=2))
    shared = [p for p, v in trainable_parameters(model) if v is model.shared_a]
    assert shared == ["shared.phm_a"]
    for adapter in model.adapters.values():
        assert adapter.down.a is model.shared_a and adapter.up.a is model.shared_a


def test_decoder_placement_in_manifest():
    entries = manifest(T5_BASE, AdapterSpec(bottleneck=24, n=4))
    adapter_paths = {e.path.rsplit(".", 2)[0] for e in entries if e.role == "adapter"}
    assert "dec.11.adapter_attn" in adapter_paths and "enc.00.adapter_ffn" in adapter_paths
    assert not any("cross" in p for p in adapter_paths)


@pytest.mark.parametrize("kind", layers.KINDS)
def test_frozen_weights_bitwise_unchanged_after_100_steps(kind, gen):
    model = build(SMALL, AdapterSpec(kind=kind, bottleneck=4, n=2), seed=4)
    frozen = {p: v.value.copy() for p, v in model.frozen_parameters()}
    params = trainable_parameters(model)
    state = OptimState(lr=1e-2, weight_decay=0.01)
    for _ in range(100):
        tokens = ids(gen, batch=3)
        with Tape() as tape:
            loss = grad.cross_entropy(forward(model, tokens), gen.integers(0, 3, size=3))
        grad.backward(loss, tape)
        adamw_step(params, [v.grad for _, v in params], state)
    for p, v in model.frozen_parameters():
        assert v.value.tobytes() == frozen[p].tobytes(), p
    # and training did move the adapters
    assert any(np.any(v.value != 0) for p, v in params if ".up." in p)


def test_clone_keeps_sharing_inside_copy():
    model = build(SMALL, AdapterSpec(kind="compacter", bottleneck=4, n=2))
    twin = model.clone()
    assert twin.shared_a is not model.shared_a
    assert all(a.down.a is twin.shared_a for a in twin.adapters.values())
    assert twin.params["shared.phm_a"] is twin.shared_a
