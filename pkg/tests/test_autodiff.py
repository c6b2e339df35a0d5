import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsg import autodiff as ad
from hsg.autodiff import (ContractError, DimensionError, Tape, Tensor,
                          backward, grad_check, no_grad)


def tensors(*arrays):
    return [ad.parameter(np.asarray(a, dtype=np.float64)) for a in arrays]


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(a, b).data, b.data)


def test_matmul_orthogonal_rows():
    a = Tensor([[1.0, 0.0]])
    b = Tensor([[0.0], [5.0]])
    assert ad.matmul(a, b).data.tolist() == [[0.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError) as err:
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    assert "(2, 3)" in str(err.value)


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = tensors(rng.normal(size=(3, 4)), rng.normal(size=(4, 2)))
    err = grad_check(lambda x, y: ad.tensor_sum(ad.matmul(x, y)), [a, b])
    assert err <= 1e-6


def test_softmax_symmetry_and_stability():
    assert ad.softmax(Tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]
    out = ad.softmax(Tensor([1000.0, 0.0])).data
    assert abs(out[0] - 1.0) < 1e-12 and abs(out[1]) < 1e-12
    assert np.all(np.isfinite(out))


def test_softmax_matches_direct_formula():
    x = np.array([1.0, 2.0, 3.0])
    e = np.exp(x)
    assert np.allclose(ad.softmax(Tensor(x)).data, e / e.sum(), atol=1e-15)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
@settings(max_examples=50, deadline=None)
def test_softmax_sums_to_one_and_permutation_equivariant(values):
    x = np.array(values)
    y = ad.softmax(Tensor(x)).data
    assert abs(y.sum() - 1.0) <= 1e-12
    perm = np.argsort(x, kind="stable")
    y_perm = ad.softmax(Tensor(x[perm])).data
    assert np.allclose(y[perm], y_perm, atol=1e-15)


def test_softmax_empty_rejected():
    with pytest.raises(DimensionError):
        ad.softmax(Tensor(np.zeros(0)))


def test_max_elementwise_values_and_tie_gradient():
    a, b = tensors([1.0, 5.0], [3.0, 2.0])
    assert ad.max_elementwise(a, b).data.tolist() == [3.0, 5.0]
    # ties route the gradient to the first argument
    a, b = tensors([2.0, 2.0], [2.0, 1.0])
    with Tape() as tape:
        out = ad.tensor_sum(ad.max_elementwise(a, b))
        backward(tape, out)
    assert a.grad.tolist() == [1.0, 1.0]
    assert b.grad is None or b.grad.tolist() == [0.0, 0.0]


def test_pointwise_values():
    assert ad.tanh(Tensor([0.0])).data.tolist() == [0.0]
    assert ad.sigmoid(Tensor([0.0])).data.tolist() == [0.5]


def test_elementwise_ops_gradients():
    rng = np.random.default_rng(1)
    cases = [
        (lambda a, b: ad.tensor_sum(ad.mul(ad.add(a, b), ad.sub(a, b))), 2),
        (lambda a, b: ad.tensor_sum(ad.mul(a, b)), 2),
        (lambda a: ad.tensor_sum(ad.tanh(a)), 1),
        (lambda a: ad.tensor_sum(ad.sigmoid(a)), 1),
        (lambda a: ad.tensor_mean(ad.exp(a)), 1),
        (lambda a, b: ad.tensor_sum(ad.concat([a, b])), 2),
    ]
    for f, arity in cases:
        args = tensors(*(rng.normal(size=5) for _ in range(arity)))
        assert grad_check(f, args) <= 1e-6


def test_incompatible_shapes_rejected():
    with pytest.raises(DimensionError):
        ad.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
    with pytest.raises(DimensionError):
        ad.mul(Tensor(np.zeros((2, 2))), Tensor(np.zeros(4)))


def test_squared_l2_basics():
    a, b = tensors([1.0, 2.0], [1.0, 2.0])
    assert ad.squared_l2(a, b).item() == 0.0
    a, b = tensors([1.0, 0.0], [0.0, 0.0])
    assert ad.squared_l2(a, b).item() == 1.0


def test_squared_l2_matches_loop_and_gradient():
    rng = np.random.default_rng(2)
    av, bv = rng.normal(size=8), rng.normal(size=8)
    a, b = tensors(av, bv)
    expected = sum((x - y) ** 2 for x, y in zip(av, bv))
    assert ad.squared_l2(a, b).item() == pytest.approx(expected, rel=1e-12)
    assert grad_check(ad.squared_l2, [a, b]) <= 1e-6
    with Tape() as tape:
        out = ad.squared_l2(a, b)
        backward(tape, out)
    assert np.allclose(a.grad, 2 * (av - bv), atol=1e-12)


def test_squared_l2_symmetry():
    rng = np.random.default_rng(3)
    a, b = tensors(rng.normal(size=6), rng.normal(size=6))
    assert ad.squared_l2(a, b).item() == ad.squared_l2(b, a).item()


def test_backward_sum_gives_ones():
    x = ad.parameter(np.zeros((2, 3)))
    with Tape() as tape:
        backward(tape, ad.tensor_sum(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_squared_l2_closed_form():
    x = ad.parameter([3.0, -1.0])
    const = Tensor([1.0, 1.0])
    with Tape() as tape:
        backward(tape, ad.squared_l2(x, const))
    assert np.allclose(x.grad, [4.0, -4.0], atol=1e-15)


def test_backward_composite_matches_finite_differences():
    rng = np.random.default_rng(4)
    a, b = tensors(rng.normal(size=(3, 4)), rng.normal(size=(4, 2)))
    err = grad_check(lambda x, y: ad.tensor_sum(ad.tanh(ad.matmul(x, y))), [a, b])
    assert err <= 1e-6


def test_backward_visits_every_node_once():
    x = ad.parameter(np.ones(3))
    with Tape() as tape:
        y = ad.tanh(x)
        z = ad.mul(y, y)
        unused = ad.exp(x)  # reachable from x but not from the root
        root = ad.tensor_sum(z)
        n_nodes = len(tape)
        backward(tape, root)
    assert tape.backward_visits == n_nodes
    assert unused.grad is None
    assert x.grad is not None


def test_backward_accumulates_across_calls():
    x = ad.parameter([1.0, 2.0])
    with Tape() as tape:
        root = ad.tensor_sum(x)
        backward(tape, root)
        first = x.grad.copy()
        backward(tape, root)
    assert np.allclose(x.grad, 2 * first)


def test_backward_rejects_non_scalar_root():
    x = ad.parameter(np.ones(3))
    with Tape() as tape:
        y = ad.tanh(x)
        with pytest.raises(ContractError):
            backward(tape, y)


def test_grad_check_linear_is_exact():
    x = ad.parameter(np.arange(4.0))
    assert grad_check(lambda t: ad.tensor_sum(t * 3.0), [x]) <= 1e-10


def test_no_grad_suppresses_recording():
    x = ad.parameter(np.ones(3))
    with Tape() as tape:
        with no_grad():
            y = ad.tanh(x)
        assert len(tape) == 0
        assert not y.requires_grad
