"""Pair-alignment loss oracles and invariances."""

import numpy as np
import pytest

from silc import autodiff as ad
from silc.autodiff import Tensor
from silc.contrastive import (
    TEMP_INIT,
    contrastive_loss,
    init_contrastive_state,
    normalize_pair,
)


def _unit(rows):
    arr = np.asarray(rows, dtype=np.float64)
    return Tensor(arr / np.sqrt((arr**2).sum(axis=-1, keepdims=True)))


class TestNormalizePair:
    def test_three_four_five(self):
        f, g = normalize_pair([3.0, 4.0], [0.0, 5.0])
        np.testing.assert_allclose(f.data, [0.6, 0.8], atol=1e-6)
        np.testing.assert_allclose(g.data, [0.0, 1.0], atol=1e-6)

    def test_unit_input_unchanged(self):
        f, _ = normalize_pair([1.0, 0.0], [0.0, 1.0])
        np.testing.assert_allclose(f.data, [1.0, 0.0], atol=1e-6)

    def test_sign_preserved(self):
        f, _ = normalize_pair([-2.0, 0.0], [1.0, 0.0])
        np.testing.assert_allclose(f.data, [-1.0, 0.0], atol=1e-6)

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError, match="zero"):
            normalize_pair([0.0, 0.0], [1.0, 0.0])


class TestLossValues:
    def test_b1_is_exactly_zero(self):
        loss = contrastive_loss(_unit([[0.6, 0.8]]), _unit([[1.0, 0.0]]), 3.7)
        assert loss.item() == 0.0

    def test_b2_hand_oracle(self):
        # identity similarity matrix at t=1: every term is log(1 + e^-1)
        f = _unit([[1.0, 0.0], [0.0, 1.0]])
        g = _unit([[1.0, 0.0], [0.0, 1.0]])
        expected = np.log(1.0 + np.exp(-1.0))
        assert abs(contrastive_loss(f, g, 1.0).item() - expected) < 1e-6

    def test_mismatched_pairs_grow_with_temperature(self):
        f = _unit([[1.0, 0.0], [0.0, 1.0]])
        g = _unit([[0.0, 1.0], [1.0, 0.0]])
        losses = [contrastive_loss(f, g, t).item() for t in (1.0, 10.0, 100.0)]
        assert losses[0] < losses[1] < losses[2]

    def test_loss_nonnegative(self):
        rs = np.random.RandomState(0)
        for _ in range(10):
            f = _unit(rs.randn(5, 8))
            g = _unit(rs.randn(5, 8))
            assert contrastive_loss(f, g, 7.3).item() >= 0.0

    def test_orthogonal_match_approaches_zero_at_large_t(self):
        f = _unit(np.eye(4))
        assert contrastive_loss(f, f, 1000.0).item() < 1e-6


class TestInvariances:
    def setup_method(self):
        rs = np.random.RandomState(3)
        self.f = _unit(rs.randn(6, 8))
        self.g = _unit(rs.randn(6, 8))

    def test_batch_permutation_invariance(self):
        perm = np.random.RandomState(1).permutation(6)
        base = contrastive_loss(self.f, self.g, 4.0).item()
        shuffled = contrastive_loss(
            Tensor(self.f.data[perm]), Tensor(self.g.data[perm]), 4.0
        ).item()
        assert abs(base - shuffled) < 1e-6

    def test_tower_swap_invariance(self):
        a = contrastive_loss(self.f, self.g, 4.0).item()
        b = contrastive_loss(self.g, self.f, 4.0).item()
        assert abs(a - b) < 1e-6


class TestPreconditions:
    def test_non_unit_rows_rejected(self):
        f = Tensor(np.array([[3.0, 4.0]]))
        with pytest.raises(ValueError, match="unit-norm"):
            contrastive_loss(f, _unit([[1.0, 0.0]]), 1.0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ad.ShapeError):
            contrastive_loss(_unit(np.eye(2)), _unit(np.eye(3)), 1.0)


class TestGradients:
    def test_grad_wrt_features_and_temperature(self):
        rs = np.random.RandomState(5)
        g_const = _unit(rs.randn(3, 4))
        f0 = rs.randn(3, 4)

        def loss_f(x):
            return contrastive_loss(ad.l2_normalize(x, axis=-1), g_const, 2.0)

        assert ad.grad_check(loss_f, Tensor(f0)) < 1e-4

        f_const = ad.l2_normalize(Tensor(rs.randn(3, 4)), axis=-1)

        def loss_t(log_t):
            return contrastive_loss(f_const, g_const, ad.exp(ad.reshape(log_t, ())))

        assert ad.grad_check(loss_t, Tensor(np.array([0.4]))) < 1e-4


class TestState:
    def test_temperature_positive_by_construction(self):
        state = init_contrastive_state()
        assert state.temperature > 0
        assert abs(float(state.log_temperature.data) - TEMP_INIT) < 1e-6
        state.log_temperature.data = np.asarray(-50.0, dtype=np.float32)
        assert state.temperature > 0
