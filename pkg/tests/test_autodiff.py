import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pah import autodiff as ad
from pah.autodiff import ContractError, DomainError, ShapeError, Tensor, grad_check


def grads_of(loss_fn, *tensors):
    with ad.ComputationTape() as tape:
        loss = loss_fn(*tensors)
        tape.backward(loss)
    return [t.grad for t in tensors]


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


class TestForward:
    def test_matmul_identity(self):
        A = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(A)).data, A)

    def test_matmul_hand(self):
        assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_relu(self):
        assert ad.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]

    def test_mean(self):
        assert ad.mean(Tensor([2.0, 4.0, 6.0])).item() == 4.0

    def test_log_softmax_symmetric(self):
        out = ad.log_softmax(Tensor([[0.0, 0.0]])).data
        np.testing.assert_allclose(out, np.log(0.5), atol=1e-12)

    def test_log_softmax_no_overflow(self):
        out = ad.log_softmax(Tensor([[1000.0, 1000.0]])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, -0.6931471805599453, atol=1e-12)

    def test_log_softmax_direct_summation(self):
        x = np.array([1.0, 2.0, 3.0])
        out = ad.log_softmax(Tensor(x[None])).data[0]
        np.testing.assert_allclose(out, x - np.log(np.exp(x).sum()), atol=1e-14)
        assert abs(np.exp(out).sum() - 1.0) < 1e-14

    def test_log_softmax_needs_two_classes(self):
        with pytest.raises(ShapeError):
            ad.log_softmax(Tensor([[1.0]]))

    def test_log_domain(self):
        with pytest.raises(DomainError):
            ad.log(Tensor([1.0, 0.0]))

    def test_broadcast_rule(self):
        out = ad.add(Tensor(np.zeros((2, 3))), Tensor([1.0, 2.0, 3.0]))
        assert out.data.tolist() == [[1, 2, 3], [1, 2, 3]]
        with pytest.raises(ShapeError):
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))

    def test_narrow_concat_stack(self):
        x = Tensor(np.arange(6.0))
        assert ad.narrow(x, 2, 4).data.tolist() == [2.0, 3.0]
        assert ad.concat([Tensor([1.0]), Tensor([2.0, 3.0])]).data.tolist() == [1.0, 2.0, 3.0]
        assert ad.stack([Tensor([1.0]), Tensor([2.0])]).shape == (2, 1)

    def test_resize_identity_and_average(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 4))
        np.testing.assert_allclose(ad.resize_bilinear(Tensor(x), 3, 4).data, x, atol=1e-15)
        y = Tensor([[[1.0, 2.0], [3.0, 4.0]]])
        assert abs(ad.resize_bilinear(y, 1, 1).item() - 2.5) < 1e-15


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.random.default_rng(0).normal(size=(3, 2)))
        (g,) = grads_of(lambda t: ad.sum(t), x)
        np.testing.assert_array_equal(g, np.ones((3, 2)))

    def test_sum_of_squares(self):
        x = leaf([1.0, 2.0, 3.0])
        (g,) = grads_of(lambda t: ad.sum(t * t), x)
        np.testing.assert_allclose(g, [2.0, 4.0, 6.0])

    def test_mean_relu_hand_chain_rule(self):
        x = leaf([-1.0, 1.0])
        (g,) = grads_of(lambda t: ad.mean(ad.relu(t)), x)
        np.testing.assert_allclose(g, [0.0, 0.5])

    def test_leaf_grads_accumulate(self):
        x = leaf([1.0, 2.0])
        grads_of(lambda t: ad.sum(t), x)
        grads_of(lambda t: ad.sum(t), x)
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_shared_input_is_summed(self):
        x = leaf([3.0])
        (g,) = grads_of(lambda t: ad.sum(t + t * t), x)
        np.testing.assert_allclose(g, [7.0])

    def test_non_scalar_loss_rejected(self):
        x = leaf([1.0, 2.0])
        with ad.ComputationTape() as tape:
            y = x * x
            with pytest.raises(ContractError):
                tape.backward(y)

    def test_foreign_loss_rejected(self):
        x = leaf([1.0])
        with ad.ComputationTape():
            y = ad.sum(x)
        with ad.ComputationTape() as other:
            with pytest.raises(ContractError):
                other.backward(y)

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with ad.ComputationTape() as tape:
            with ad.no_grad():
                ad.sum(x * x)
            assert len(tape) == 0

    def test_frozen_leaf_gets_no_grad(self):
        a = leaf([1.0, 2.0])
        b = Tensor([3.0, 4.0])
        grads_of(lambda s, t: ad.sum(s * t), a, b)
        assert b.grad is None
        np.testing.assert_allclose(a.grad, [3.0, 4.0])


class TestGradCheck:
    def test_linear_is_exact(self):
        x = Tensor(np.random.default_rng(1).normal(size=(4, 3)))
        assert grad_check(lambda t: ad.sum(t), x) < 1e-9

    def test_exp(self):
        assert grad_check(lambda t: ad.sum(ad.exp(t)), Tensor([0.0, 1.0])) < 1e-6

    def test_matmul_against_fd(self):
        rng = np.random.default_rng(2)
        A, B = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 2)))
        assert grad_check(lambda t: ad.sum(ad.matmul(t, B)), A) < 1e-5

    def test_restores_input(self):
        x = Tensor(np.array([0.3, -0.2]))
        before = x.data.copy()
        grad_check(lambda t: ad.sum(ad.exp(t)), x)
        np.testing.assert_array_equal(x.data, before)

    @pytest.mark.parametrize("eps", [1e-9, 1e-2])
    def test_eps_range(self, eps):
        with pytest.raises(ContractError):
            grad_check(lambda t: ad.sum(t), Tensor([1.0]), eps=eps)

    def test_detects_wrong_backward(self, monkeypatch):
        monkeypatch.setattr(ad, "_relu_backward", lambda g, mask: g)
        x = Tensor(np.array([-1.0, 2.0, -0.5]))
        assert grad_check(lambda t: ad.sum(ad.relu(t)), x) > 0.1


finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4,), elements=finite))
def test_add_mul_gradients_match_closed_form(a, b):
    A, B = leaf(a), leaf(b)
    ga, gb = grads_of(lambda s, t: ad.sum(ad.mul(s, t)), A, B)
    np.testing.assert_allclose(ga, np.broadcast_to(b, (3, 4)))
    np.testing.assert_allclose(gb, a.sum(axis=0))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (2, 5), elements=finite))
def test_log_softmax_rows_normalize(x):
    out = ad.log_softmax(Tensor(x)).data
    np.testing.assert_allclose(np.exp(out).sum(axis=1), 1.0, atol=1e-12)
