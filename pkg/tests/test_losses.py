import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pah import autodiff as ad
from pah.autodiff import Tensor
from pah.losses import (LossWeights, hard_loss_main, kl_distill, prototype_targets, soft_loss_main,
                        soft_loss_prototypes, total_loss)
from pah.model import (backbone_forward, embedding_from, head_forward, hypernet_forward, model_forward,
                       prototype_inputs, snapshot)


def _kl_np(p_logits, q_logits):
    p = np.exp(p_logits - np.log(np.exp(p_logits).sum(axis=1, keepdims=True)))
    q = np.exp(q_logits - np.log(np.exp(q_logits).sum(axis=1, keepdims=True)))
    return float(np.mean((p * (np.log(p) - np.log(q))).sum(axis=1)))


class TestHardLoss:
    def test_uniform(self):
        assert abs(hard_loss_main(Tensor(np.zeros((5, 10))), np.arange(5)).item() - 2.302585) < 1e-6

    def test_saturation(self):
        logits = np.zeros((3, 4))
        logits[np.arange(3), [0, 2, 3]] = 20.0
        assert hard_loss_main(Tensor(logits), [0, 2, 3]).item() < 1e-3

    def test_hand_value(self):
        value = hard_loss_main(Tensor([[1.0, 0.0]]), [0]).item()
        assert abs(value - (-math.log(math.e / (math.e + 1)))) < 1e-12
        assert abs(value - 0.313262) < 1e-6

    def test_label_range(self):
        with pytest.raises(ValueError):
            hard_loss_main(Tensor(np.zeros((2, 3))), [0, 3])


class TestKL:
    def test_identity(self):
        z = np.random.default_rng(0).normal(size=(4, 3))
        assert abs(kl_distill(z, Tensor(z)).item()) < 1e-9

    def test_hand_value(self):
        old = np.log([[0.7, 0.3]])
        new = np.log([[0.5, 0.5]])
        expected = 0.7 * math.log(1.4) + 0.3 * math.log(0.6)
        assert abs(kl_distill(old, Tensor(new)).item() - expected) < 1e-12
        assert abs(expected - 0.082282) < 1e-6

    def test_matches_numpy_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
        assert abs(kl_distill(a, Tensor(b)).item() - _kl_np(a, b)) < 1e-12

    def test_temperature(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        assert abs(kl_distill(a, Tensor(b), 2.0).item() - _kl_np(a / 2, b / 2)) < 1e-12

    def test_old_side_gets_no_gradient(self):
        old = Tensor(np.random.default_rng(3).normal(size=(2, 3)), requires_grad=True)
        new = Tensor(np.random.default_rng(4).normal(size=(2, 3)), requires_grad=True)
        with ad.ComputationTape() as tape:
            tape.backward(kl_distill(old, new))
        assert old.grad is None and new.grad is not None

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            kl_distill(np.zeros((2, 3)), Tensor(np.zeros((2, 4))))


def _register(model, k, seed):
    rng = np.random.default_rng(seed)
    model.register_task(k, [rng.normal(size=(1, 3, 3)) for _ in range(2)])


def _perturb(model, seed, scale=0.1):
    rng = np.random.default_rng(seed)
    for p in model.network_parameters():
        p.data = p.data + rng.normal(0, scale, p.shape)


class TestSoftLosses:
    def test_k1_is_zero(self, small_model):
        x = np.zeros((2, 1, 6, 6))
        assert soft_loss_main(None, small_model, x, 1).item() == 0.0
        assert soft_loss_prototypes(None, small_model, 1).item() == 0.0

    def test_zero_after_snapshot(self, small_model):
        _register(small_model, 2, 1)
        _register(small_model, 3, 2)
        old = snapshot(small_model)
        x = np.random.default_rng(0).normal(size=(4, 1, 6, 6))
        for k in (2, 3):
            assert abs(soft_loss_main(old, small_model, x, k).item()) < 1e-9
            assert abs(soft_loss_prototypes(old, small_model, k).item()) < 1e-9

    def test_lsm_k3_is_two_term_average(self, small_model):
        _register(small_model, 2, 1)
        old = snapshot(small_model)
        _register(small_model, 3, 2)
        _perturb(small_model, 7)
        x = np.random.default_rng(0).normal(size=(5, 1, 6, 6))
        terms = [_kl_np(model_forward(old, x, j).data, model_forward(small_model, x, j).data) for j in (1, 2)]
        assert abs(soft_loss_main(old, small_model, x, 3).item() - np.mean(terms)) < 1e-9

    @pytest.mark.parametrize("mode", ["live", "snapshot"])
    def test_lsp_term_by_term(self, small_model, mode):
        old = snapshot(small_model)
        _register(small_model, 2, 1)
        _perturb(small_model, 8)
        for t in small_model.prototypes.tensors(1):
            t.data = t.data + 0.05
        total = 0.0
        for c in range(2):
            live = small_model.prototypes.tensors(1)
            src = live if mode == "live" else old.prototypes.tensors(1)
            # each class prototype on its own, through its task's generated head
            x_old = prototype_inputs(old, [src[c]]).data
            x_new = prototype_inputs(small_model, [live[c]]).data
            head_old = hypernet_forward(old, embedding_from(src))
            head_new = hypernet_forward(small_model, embedding_from(live))
            lo = head_forward(backbone_forward(old, x_old), head_old).data
            ln = head_forward(backbone_forward(small_model, x_new), head_new).data
            total += _kl_np(lo, ln)
        got = soft_loss_prototypes(old, small_model, 2, old_inputs=mode).item()
        assert abs(got - total) < 1e-9

    def test_targets_override(self, small_model):
        old = snapshot(small_model)
        _register(small_model, 2, 1)
        _perturb(small_model, 9)
        targets = {1: prototype_targets(old, small_model, 1)}
        a = soft_loss_prototypes(old, small_model, 2, targets=targets).item()
        b = soft_loss_prototypes(old, small_model, 2).item()
        assert a == b


class TestTotal:
    def test_hand_value(self):
        assert total_loss(1.0, 2.0, 3.0, LossWeights(0.5, 1.0)) == 3.5

    def test_zero_stability(self):
        assert total_loss(1.25, 9.0, 7.0, LossWeights(0.0, 1.0)) == 1.25

    def test_identity(self):
        assert total_loss(Tensor(0.7), 0.0, 0.0, LossWeights()).item() == 0.7

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(stability=-0.1)


logit_rows = st.integers(0, 2**32 - 1)


@settings(max_examples=200, deadline=None)
@given(logit_rows, st.floats(0.25, 4.0))
def test_kl_gibbs_inequality(seed, temperature):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(0, 3, (3, 5)), rng.normal(0, 3, (3, 5))
    assert kl_distill(a, Tensor(b), temperature).item() >= -1e-9
