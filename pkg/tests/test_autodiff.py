import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stageflow import autodiff as ad
from stageflow.autodiff import backward, constant, matmul, param, silu, tape
from stageflow.errors import ContractError, DimensionError
from stageflow.verify import check_grad_primitives, grad_matches_fd


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop reference with fixed row-major ascending summation."""
    m, kk = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for k in range(kk):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = matmul(constant(a), constant(np.eye(2))).data
    assert np.array_equal(out, a)


def test_matmul_zero():
    z = np.zeros((2, 3))
    out = matmul(constant(z), constant(np.random.default_rng(0).normal(size=(3, 4)))).data
    assert np.array_equal(out, np.zeros((2, 4)))


def test_matmul_matches_naive_oracle():
    rng = np.random.default_rng(1)
    a = rng.uniform(-2, 2, size=(3, 4))
    b = rng.uniform(-2, 2, size=(4, 2))
    got = matmul(constant(a), constant(b)).data
    want = naive_matmul(a, b)
    assert np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-300)) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(
    m=st.integers(1, 5), k=st.integers(1, 5), n=st.integers(1, 5),
    seed=st.integers(0, 2**31),
)
def test_matmul_oracle_property(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-2, 2, size=(m, k))
    b = rng.uniform(-2, 2, size=(k, n))
    got = matmul(constant(a), constant(b)).data
    want = naive_matmul(a, b)
    assert np.allclose(got, want, rtol=1e-12, atol=1e-300)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(constant(np.zeros((2, 3))), constant(np.zeros((4, 2))))


def test_silu_zero_and_asymptote():
    assert silu(constant(0.0)).data == 0.0
    out = silu(constant(40.0)).item()
    assert abs(out - 40.0) <= 1e-12
    # silu(x) == x - x*sigmoid(-x)
    x = np.linspace(-3, 3, 11)
    got = silu(constant(x)).data
    want = x - x / (1.0 + np.exp(x))
    assert np.allclose(got, want, atol=1e-15)


def test_silu_derivative_matches_finite_differences():
    rng = np.random.default_rng(2)
    x = param(rng.uniform(-2, 2, size=(7,)), "x")
    ok, detail = grad_matches_fd(lambda: silu(x).sum(), {"x": x}, rtol=1e-6)
    assert ok, detail


def test_backward_product_rule():
    x = param(np.array(3.0), "x")
    y = param(np.array(5.0), "y")
    with tape():
        loss = x * y
    grads = backward(loss)
    assert grads[x] == pytest.approx(5.0)
    assert grads[y] == pytest.approx(3.0)


def test_backward_sum_is_all_ones():
    x = param(np.arange(6.0).reshape(2, 3), "x")
    with tape():
        loss = x.sum()
    grads = backward(loss)
    assert np.array_equal(grads[x], np.ones((2, 3)))


def test_backward_mlp_matches_finite_differences():
    rng = np.random.default_rng(3)
    w1 = param(rng.uniform(-1, 1, size=(3, 5)), "w1")
    b1 = param(rng.uniform(-1, 1, size=(5,)), "b1")
    w2 = param(rng.uniform(-1, 1, size=(5, 2)), "w2")
    x = constant(rng.uniform(-2, 2, size=(4, 3)))

    def loss_fn():
        return (matmul(silu(matmul(x, w1) + b1), w2) ** 2.0).sum()

    ok, detail = grad_matches_fd(loss_fn, {"w1": w1, "b1": b1, "w2": w2}, rtol=1e-5)
    assert ok, detail


def test_backward_rejects_non_scalar_loss():
    x = param(np.ones(3), "x")
    with tape():
        loss = x * 2.0
    with pytest.raises(ContractError):
        backward(loss)


def test_backward_rejects_untaped_loss():
    x = param(np.ones(3), "x")
    loss = (x * 2.0).sum()  # no tape active
    with pytest.raises(ContractError):
        backward(loss)


def test_param_rejects_non_finite():
    with pytest.raises(ValueError):
        param(np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        param(np.array([np.inf]))


def test_all_primitives_match_finite_differences():
    ok, detail = check_grad_primitives()
    assert ok, detail


def test_gradient_accumulates_over_reuse():
    x = param(np.array(2.0), "x")
    with tape():
        loss = x * x + x * 3.0
    grads = backward(loss)
    assert grads[x] == pytest.approx(2 * 2.0 + 3.0)


def test_softmax_rows_sum_to_one_with_masked_logits():
    logits = np.array([[1.0, 2.0, -np.inf], [0.5, -np.inf, -np.inf]])
    p = ad.softmax(constant(logits)).data
    assert np.allclose(p.sum(axis=1), 1.0)
    assert p[0, 2] == 0.0 and p[1, 1] == 0.0 and p[1, 0] == 1.0


def test_eval_mode_records_nothing():
    x = param(np.ones(3), "x")
    out = (x * 2.0).sum()  # outside tape
    assert out._tape is None and not out.tracked
