import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kpft import grad, gradcheck
from kpft.grad import GradError, Tape, Var


def leaf(value):
    return Var(np.asarray(value, dtype=np.float64), requires_grad=True)


def grads_of(build, *leaves):
    with Tape() as tape:
        loss = build()
    grad.backward(loss, tape)
    return [v.grad for v in leaves]


def test_sum_gives_ones():
    a = leaf([[1.0, 2.0], [3.0, 4.0]])
    (ga,) = grads_of(lambda: grad.total(a), a)
    np.testing.assert_array_equal(ga, np.ones((2, 2)))


def test_sum_of_matmul_closed_form(gen):
    a, b = leaf(gen.normal(size=(3, 4))), leaf(gen.normal(size=(4, 2)))
    ga, gb = grads_of(lambda: grad.total(a @ b), a, b)
    np.testing.assert_allclose(ga, np.ones((3, 2)) @ b.value.T, rtol=1e-14)
    np.testing.assert_allclose(gb, a.value.T @ np.ones((3, 2)), rtol=1e-14)


def test_kron_backward_rule(gen):
    # dA[a,b] = <G block (a,b), B>_F ; dB = sum_ab A[a,b] G block (a,b)
    a, b = leaf(gen.normal(size=(2, 3))), leaf(gen.normal(size=(3, 2)))
    g = gen.normal(size=(6, 6))
    ga, gb = grads_of(lambda: grad.total(grad.mul(grad.kron(a, b), Var(g))), a, b)
    blocks = [[g[i * 3:(i + 1) * 3, j * 2:(j + 1) * 2] for j in range(3)] for i in range(2)]
    np.testing.assert_allclose(ga, [[np.sum(blocks[i][j] * b.value) for j in range(3)] for i in range(2)], rtol=1e-13)
    expected_b = sum(a.value[i, j] * blocks[i][j] for i in range(2) for j in range(3))
    np.testing.assert_allclose(gb, expected_b, rtol=1e-13)


def test_kron_backward_identity_pattern():
    # B = I_p, G = I: each diagonal block contributes trace(I_p) = p
    p = 3
    a, b = leaf(np.ones((2, 2))), leaf(np.eye(p))
    ga, _ = grads_of(lambda: grad.total(grad.mul(grad.kron(a, b), Var(np.eye(2 * p)))), a, b)
    np.testing.assert_array_equal(ga, p * np.eye(2))


def test_kron_zero_a_gives_zero_b_grad(gen):
    a, b = leaf(np.zeros((2, 2))), leaf(gen.normal(size=(2, 3)))
    _, gb = grads_of(lambda: grad.total(grad.kron(a, b)), a, b)
    np.testing.assert_array_equal(gb, np.zeros((2, 3)))


def test_gelu_values():
    x = Var(np.array([0.0, 1.0, 10.0, -1.0]))
    y = grad.gelu(x).value
    assert y[0] == 0.0
    # 1 * Phi(1), Phi(1) = 0.841344746068543 to 15 places
    assert abs(y[1] - 0.841344746068543) < 1e-12
    assert abs(y[2] - 10.0) < 1e-6
    assert abs(y[3] - (-1.0 + 0.841344746068543)) < 1e-12


def test_layer_norm_constant_row_is_zero():
    x = Var(np.full((2, 5), 3.7))
    out = grad.layer_norm(x, Var(np.ones(5)), Var(np.zeros(5))).value
    np.testing.assert_array_equal(out, np.zeros((2, 5)))


def test_layer_norm_empty_dim_errors():
    with pytest.raises(ValueError):
        grad.layer_norm(Var(np.ones((2, 0))), Var(np.ones(0)))


def test_softmax_uniform():
    y = grad.softmax(Var(np.full((3, 4), 2.5))).value
    np.testing.assert_allclose(y, np.full((3, 4), 0.25), rtol=1e-15)


def test_cross_entropy_limit():
    logits = np.array([[800.0, 0.0, 0.0], [0.0, 0.0, 800.0]])
    loss = grad.cross_entropy(Var(logits), np.array([0, 2])).value
    assert loss.shape == (1, 1) and loss[0, 0] == 0.0


def test_backward_requires_scalar(gen):
    a = leaf(gen.normal(size=(2, 2)))
    with Tape() as tape:
        y = a @ a
    with pytest.raises(GradError):
        grad.backward(y, tape)


def test_backward_detached_graph_errors(gen):
    a = leaf(gen.normal(size=(2, 2)))
    with Tape():
        loss = grad.total(a)
    with Tape() as other:
        pass
    with pytest.raises(GradError):
        grad.backward(loss, other)
    with pytest.raises(GradError):
        grad.backward(grad.total(a), other)  # recorded on no tape at all


def test_grads_are_overwritten_not_accumulated(gen):
    a = leaf(gen.normal(size=(3,)))
    for _ in range(3):
        (ga,) = grads_of(lambda: grad.total(grad.reshape(a, (1, 3))), a)
        np.testing.assert_array_equal(ga, np.ones(3))


def test_unused_leaf_gets_zero_grad(gen):
    a, b = leaf(gen.normal(size=(2, 2))), leaf(gen.normal(size=(2, 2)))
    with Tape() as tape:
        grad.total(b)  # b touched by the tape, not by the loss
        loss = grad.total(a)
    grad.backward(loss, tape)
    np.testing.assert_array_equal(a.grad, np.ones((2, 2)))


def test_frozen_inputs_get_no_grad(gen):
    a, w = leaf(gen.normal(size=(2, 3))), Var(gen.normal(size=(3, 2)))
    grads_of(lambda: grad.total(a @ w), a)
    assert w.grad is None


def test_reused_value_sums_paths(gen):
    a = leaf(gen.normal(size=(2, 2)))
    (ga,) = grads_of(lambda: grad.total(a + a + grad.scale(a, 3.0)), a)
    np.testing.assert_array_equal(ga, np.full((2, 2), 5.0))


def test_broadcast_add_unbroadcasts(gen):
    x, b = leaf(gen.normal(size=(4, 3, 2))), leaf(gen.normal(size=(2,)))
    _, gb = grads_of(lambda: grad.total(x + b), x, b)
    np.testing.assert_array_equal(gb, np.full(2, 12.0))


def test_composite_graph_second_order_differences(gen):
    """Plain central differences with a per-element step of 1e-6 max(1, |x|)."""
    w = leaf(gen.normal(size=(4, 3)) * 0.5)
    gain = leaf(gen.uniform(0.5, 1.5, size=3))
    x = Var(gen.normal(size=(5, 4)))
    targets = gen.integers(0, 3, size=5)

    def model():
        h = grad.layer_norm(grad.gelu(x @ w), gain)
        return grad.cross_entropy(grad.softmax(h) + h, targets)

    with Tape() as tape:
        loss = model()
    grad.backward(loss, tape)
    for v in (w, gain):
        fd = gradcheck.numeric_grad(lambda: float(model().value.sum()), v, step=1e-6, order=2)
        assert gradcheck.rel_err(v.grad, fd) < 1e-5


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_matmul_chain_property(seed):
    g = np.random.default_rng(seed)
    a, b, c = (leaf(g.normal(size=s)) for s in ((2, 3), (3, 4), (4, 2)))
    fn = lambda: grad.total(grad.matmul(grad.matmul(a, b), c))  # noqa: E731
    analytic = grads_of(fn, a, b, c)
    for v, ga in zip((a, b, c), analytic):
        fd = gradcheck.numeric_grad(lambda: float(fn().value.sum()), v)
        assert gradcheck.rel_err(ga, fd) < 1e-8
