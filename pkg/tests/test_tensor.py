import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layercomp.errors import ContractError, DimensionError, EvaluationError
from layercomp.tensor import (
    GradTape,
    Tensor,
    backward,
    gelu,
    gradient_check,
    layer_norm,
    matmul,
    softmax_last_axis,
)


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def test_tensor_rejects_empty_extent():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((2, 0)))


def test_matmul_identity():
    out = matmul(Tensor([[1, 0], [0, 1]]), Tensor([[5, 6], [7, 8]]))
    assert out.data.tolist() == [[5, 6], [7, 8]]


def test_matmul_row_times_column():
    assert matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]


def test_matmul_random_4x3_3x2():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))
    assert np.max(np.abs(matmul(Tensor(a), Tensor(b)).data - naive_matmul(a, b))) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**31))
def test_matmul_matches_triple_loop(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    assert np.max(np.abs(matmul(Tensor(a), Tensor(b)).data - naive_matmul(a, b))) <= 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_layer_norm_constant_row_collapses_to_bias():
    out = layer_norm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    assert out.data.tolist() == [[0.0, 0.0, 0.0]]


def test_layer_norm_two_element_row():
    out = layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-5)
    # mean 2, variance 1
    expected = np.array([-1.0, 1.0]) / math.sqrt(1.0 + 1e-5)
    assert np.allclose(out.data[0], expected, atol=1e-12)
    assert np.allclose(out.data[0], [-1.0, 1.0], atol=1e-4)


def test_layer_norm_zero_gain_returns_bias():
    rng = np.random.default_rng(0)
    b = rng.normal(size=5)
    out = layer_norm(Tensor(rng.normal(size=(3, 5))), Tensor(np.zeros(5)), Tensor(b))
    assert np.array_equal(out.data, np.tile(b, (3, 1)))


def test_layer_norm_rows_have_zero_mean():
    x = Tensor(np.random.default_rng(3).normal(size=(10, 7)) * 50 + 3)
    out = layer_norm(x, Tensor(np.ones(7)), Tensor(np.zeros(7)))
    assert np.max(np.abs(out.data.mean(axis=-1))) <= 1e-10


def test_layer_norm_width_mismatch():
    with pytest.raises(DimensionError):
        layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


def test_gelu_fixed_points():
    assert gelu(Tensor([0.0])).data[0] == 0.0
    assert abs(gelu(Tensor([10.0])).data[0] - 10.0) <= 1e-6


def test_gelu_at_one_matches_high_precision():
    mpmath.mp.dps = 40
    ref = mpmath.mpf("0.5") * (1 + mpmath.erf(1 / mpmath.sqrt(2)))
    assert abs(gelu(Tensor([1.0])).data[0] - float(ref)) <= 1e-15


def test_softmax_cases():
    assert softmax_last_axis(Tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]
    big = softmax_last_axis(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big))
    assert big[0] == pytest.approx(1.0) and big[1] == pytest.approx(0.0, abs=1e-300)
    x = [1.0, 2.0, 3.0]
    direct = [math.exp(v) / sum(math.exp(u) for u in x) for v in x]
    assert np.max(np.abs(softmax_last_axis(Tensor(x)).data - direct)) <= 1e-12


def test_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(0).normal(size=(6, 9)) * 20)
    assert np.max(np.abs(softmax_last_axis(x).data.sum(axis=-1) - 1.0)) <= 1e-12


def test_backward_sum_is_all_ones():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with GradTape() as tape:
        y = x.sum()
    assert backward(y, tape)[x].tolist() == [1.0, 1.0, 1.0]


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with GradTape() as tape:
        y = (x * x).sum()
    assert backward(y, tape)[x].tolist() == [2.0, 4.0, 6.0]


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        backward(y, tape)


def test_empty_tape_gives_zero_gradients():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    tape = GradTape()
    grads = backward(Tensor(3.0), tape, wrt=[w])
    assert len(tape) == 0
    assert np.array_equal(grads[w], np.zeros((2, 2)))


def test_no_recording_outside_tape():
    x = Tensor([1.0], requires_grad=True)
    with GradTape() as tape:
        pass
    (x * x).sum()
    assert len(tape) == 0


def test_one_gradient_per_leaf_even_when_reused():
    x = Tensor([3.0], requires_grad=True)
    with GradTape() as tape:
        y = (x * x + x * 2.0 + x).sum()
    grads = backward(y, tape)
    assert list(grads) == [x]
    assert grads[x].tolist() == [2 * 3.0 + 2.0 + 1.0]


def test_gradient_check_quadratic_form():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 4))
    A = Tensor(a @ a.T)
    x = Tensor(rng.normal(size=(4, 1)))
    err = gradient_check(lambda: (x.transpose() @ A @ x).sum(), [x])
    assert err <= 1e-9


def test_gradient_check_zero_function():
    x = Tensor(np.ones(3))
    assert gradient_check(lambda: (x * 0.0).sum(), [x]) == 0.0


def test_gradient_check_restores_params():
    x = Tensor([0.3, -1.2])
    before = x.data.copy()
    gradient_check(lambda: (x * x * x).sum(), [x])
    assert np.array_equal(x.data, before)
    assert not x.requires_grad


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_gradient_check_non_finite():
    x = Tensor([0.0])
    with pytest.raises(EvaluationError):
        gradient_check(lambda: (x * np.inf).sum(), [x])


OPS = {
    "matmul": lambda a, b, c, v: (a @ b) * c,
    "add_broadcast": lambda a, b, c, v: (a @ b + v) * c,
    "layer_norm": lambda a, b, c, v: layer_norm(a @ b, v * 2.0, v * 0.5) * c,
    "gelu": lambda a, b, c, v: gelu(a @ b) * c,
    "softmax": lambda a, b, c, v: softmax_last_axis(a @ b) * c,
    "reshape_transpose": lambda a, b, c, v: (a @ b).reshape(3, 4).transpose().reshape(4, 3) * c,
    "mean_sum": lambda a, b, c, v: (a @ b).mean(axis=0) * c.sum(axis=0),
    "sub": lambda a, b, c, v: ((a @ b) - c) * (a @ b - v),
}


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_matches_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(4, 2)))
    b = Tensor(rng.normal(size=(2, 3)))
    c = Tensor(rng.normal(size=(4, 3)))
    v = Tensor(rng.normal(size=3))
    err = gradient_check(lambda: OPS[name](a, b, c, v).sum(), [a, b, v], step=1e-5)
    assert err <= 1e-5


def test_batched_matmul_gradients():
    rng = np.random.default_rng(5)
    a = Tensor(rng.normal(size=(2, 3, 4)))
    b = Tensor(rng.normal(size=(2, 4, 5)))
    w = Tensor(rng.normal(size=(2, 3, 5)))
    assert gradient_check(lambda: ((a @ b) * w).sum(), [a, b]) <= 1e-5


def test_forward_values_stay_finite():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(5, 6)) * 1e3)
    out = layer_norm(gelu(x), Tensor(np.ones(6)), Tensor(np.zeros(6)))
    assert np.all(np.isfinite(softmax_last_axis(out).data))
