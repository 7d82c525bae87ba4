import numpy as np
import pytest

from kpft import grad, gradcheck


def test_every_registered_op_passes_small_run():
    for result in gradcheck.run_gradchecks(trials=5, seed=3):
        assert result.ok, result.line()


def test_filter_runs_only_requested_op():
    results = gradcheck.run_gradchecks(["kron"], trials=3)
    assert [r.op for r in results] == ["kron"]


def test_unknown_op_rejected():
    with pytest.raises(KeyError):
        gradcheck.run_gradchecks(["nope"], trials=1)


def _broken_gelu(gen):
    x = gradcheck._leaf(gen, (2, 3))

    def fn():
        y = grad.gelu(x)
        # same value, vjp off by 10%
        return grad.primitive("bad", y.value, (x,), lambda g: (1.1 * g * (y.value / np.where(x.value == 0, 1, x.value)),))

    return fn, {"x": x}


def test_injected_fault_is_caught():
    (result,) = gradcheck.run_gradchecks(["bad"], trials=3, registry={"bad": _broken_gelu})
    assert not result.ok
    assert result.worst_input.startswith("x[")


def test_numeric_grad_restores_input(gen):
    v = grad.Var(gen.normal(size=(3, 2)))
    before = v.value.copy()
    gradcheck.numeric_grad(lambda: float(np.sum(v.value ** 3)), v)
    np.testing.assert_array_equal(v.value, before)


def test_numeric_grad_orders_agree_on_cubic(gen):
    v = grad.Var(gen.normal(size=5))
    exact = 3 * v.value ** 2
    for order, step in ((2, 1e-6), (4, 1e-3)):
        fd = gradcheck.numeric_grad(lambda: float(np.sum(v.value ** 3)), v, step=step, order=order)
        np.testing.assert_allclose(fd, exact, rtol=1e-7)


def test_materialize_checks_pass():
    for result in gradcheck.run_materialize_checks(trials=40, seed=5):
        assert result.ok, result.line()
