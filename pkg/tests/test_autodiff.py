import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from mrmp import autodiff as ad
from mrmp.autodiff import Tensor
from mrmp.errors import ContractError, DimensionError, DomainError
from mrmp.gradcheck import check_gradients

from conftest import leaf

finite = st.floats(-2, 2, allow_nan=False, allow_infinity=False)


def test_matmul_examples():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert_array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)
    assert_array_equal(ad.matmul(Tensor(b), Tensor([[1.0], [1.0]])).data, [[3.0], [7.0]])
    assert_array_equal(ad.matmul(Tensor(np.zeros((3, 2))), Tensor(b)).data, np.zeros((3, 2)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_backward_formula(rng):
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    g = rng.normal(size=(3, 2))
    ad.backward(ad.reduce_sum(ad.hadamard(ad.matmul(a, b), Tensor(g))))
    assert_allclose(a.grad, g @ b.data.T)
    assert_allclose(b.grad, a.data.T @ g)


def test_hadamard_examples():
    a = np.array([1.0, 2.0])
    assert_array_equal(ad.hadamard(Tensor(a), Tensor(np.ones(2))).data, a)
    assert_array_equal(ad.hadamard(Tensor(a), Tensor([3.0, 4.0])).data, [3.0, 8.0])
    with pytest.raises(DimensionError):
        ad.hadamard(Tensor(a), Tensor(np.ones(3)))


def test_scalar_is_the_only_broadcast():
    x = leaf(np.ones((2, 3)))
    s = leaf(2.0)
    out = ad.reduce_sum(ad.hadamard(x, s))
    ad.backward(out)
    assert out.item() == 12.0
    assert s.grad == 6.0
    with pytest.raises(DimensionError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


def test_cross_entropy_examples():
    for C in (2, 3, 7):
        loss = ad.softmax_cross_entropy(Tensor(np.zeros((4, C))), np.zeros(4, dtype=int))
        assert_allclose(loss.item(), math.log(C), rtol=1e-15)
    loss = ad.softmax_cross_entropy(Tensor([[10.0, -10.0]]), [0])
    assert_allclose(loss.item(), math.log1p(math.exp(-20.0)), rtol=1e-9)
    assert_allclose(loss.item(), 2.06e-9, rtol=1e-3)
    logits = leaf(np.zeros((1, 2)))
    ad.backward(ad.softmax_cross_entropy(logits, [0]))
    assert_allclose(logits.grad, [[-0.5, 0.5]])


def test_cross_entropy_label_range():
    with pytest.raises(IndexError):
        ad.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(IndexError):
        ad.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [-1, 0])


def test_cross_entropy_against_torch(rng):
    torch = pytest.importorskip("torch")
    logits = rng.normal(size=(5, 4)) * 3
    labels = rng.integers(0, 4, 5)
    t = torch.tensor(logits, requires_grad=True)
    ref = torch.nn.functional.cross_entropy(t, torch.tensor(labels))
    ref.backward()
    x = leaf(logits)
    loss = ad.softmax_cross_entropy(x, labels)
    ad.backward(loss)
    assert_allclose(loss.item(), ref.item(), rtol=1e-12)
    assert_allclose(x.grad, t.grad.numpy(), rtol=1e-10, atol=1e-14)


def test_backward_examples(rng):
    w = leaf(rng.normal(size=(3, 4)))
    ad.backward(ad.reduce_sum(w))
    assert_array_equal(w.grad, np.ones((3, 4)))
    w = leaf(rng.normal(size=(3, 4)))
    ad.backward(ad.reduce_sum(ad.hadamard(w, w)))
    assert_allclose(w.grad, 2 * w.data)


def test_backward_needs_scalar():
    with pytest.raises(ContractError):
        ad.backward(ad.scale(leaf(np.ones(3)), 2.0))


def test_leaf_gradients_accumulate(rng):
    w = leaf(rng.normal(size=4))
    ad.backward(ad.reduce_sum(w))
    ad.backward(ad.reduce_sum(ad.scale(w, 3.0)))
    assert_allclose(w.grad, 4 * np.ones(4))


def test_adjoint_linearity(rng):
    x = rng.normal(size=(3, 4))
    f1 = lambda w: ad.reduce_sum(ad.exp(w))  # noqa: E731
    f2 = lambda w: ad.reduce_sum(ad.square(ad.matmul(w, Tensor(np.ones((4, 2))))))  # noqa: E731
    joint = leaf(x)
    ad.backward(ad.add(f1(joint), f2(joint)))
    sep = leaf(x)
    ad.backward(f1(sep))
    ad.backward(f2(sep))
    assert_allclose(joint.grad, sep.grad, rtol=1e-14)


def test_unused_branch_gets_no_adjoint(rng):
    used, unused = leaf(rng.normal(size=3)), leaf(rng.normal(size=3))
    ad.exp(unused)
    ad.backward(ad.reduce_sum(used))
    assert unused.grad is None


def test_shared_node_visited_once(rng):
    # y feeds the loss twice; a double visit would give 4 instead of 2.
    x = leaf(np.array([1.0]))
    y = ad.scale(x, 1.0)
    ad.backward(ad.reduce_sum(ad.add(y, y)))
    assert_allclose(x.grad, [2.0])


def test_replay_is_bit_identical(rng):
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 5))

    def run():
        a, b = leaf(x), leaf(w)
        out = ad.reduce_sum(ad.relu(ad.matmul(a, b)))
        ad.backward(out)
        return out.data, a.grad, b.grad

    for p, q in zip(run(), run()):
        assert_array_equal(p, q)


def test_no_grad_records_nothing():
    w = leaf(np.ones(3))
    with ad.no_grad():
        out = ad.exp(w)
    assert not out.requires_grad
    assert out._parents == ()


def test_domain_and_shape_errors():
    with pytest.raises(DomainError):
        ad.log(Tensor([1.0, 0.0]))
    with pytest.raises(DimensionError):
        ad.reshape(Tensor(np.ones(6)), (4, 2))
    with pytest.raises(DimensionError):
        ad.add_bias(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))


def test_operator_sugar():
    a, b = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])
    assert_array_equal((a + b).data, [4.0, 7.0])
    assert_array_equal((a - b).data, [-2.0, -3.0])
    assert_array_equal((2.0 * a).data, [2.0, 4.0])
    assert_array_equal((1.0 - a).data, [0.0, -1.0])
    assert_array_equal((-a).data, [-1.0, -2.0])


def test_float32_data_stays_float32():
    a = Tensor(np.ones((2, 2), dtype=np.float32))
    assert ad.exp(ad.scale(a, 2.0)).dtype == np.float32
    assert ad.add_scalar(a, 1.0).dtype == np.float32


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite))
def test_forward_stays_finite(x):
    out = ad.softmax_cross_entropy(ad.matmul(Tensor(x), Tensor(np.ones((4, 3)))), [0, 1, 2])
    assert np.isfinite(out.item())


@settings(max_examples=25, deadline=None)
@given(
    arrays(np.float64, (3, 4), elements=finite),
    arrays(np.float64, (4, 2), elements=finite),
    st.sampled_from(["matmul", "hadamard_chain", "softmax"]),
)
def test_random_graphs_match_finite_differences(x, w, kind):
    if kind == "matmul":
        fn = lambda t: ad.matmul(t[0], t[1])  # noqa: E731
        inputs = [x, w]
    elif kind == "hadamard_chain":
        fn = lambda t: ad.exp(ad.hadamard(ad.scale(t[0], 0.5), ad.square(t[0])))  # noqa: E731
        inputs = [x]
    else:
        fn = lambda t: ad.softmax_cross_entropy(ad.matmul(t[0], t[1]), [0, 1, 1])  # noqa: E731
        inputs = [x, w]
    assert check_gradients(kind, fn, inputs).passed
