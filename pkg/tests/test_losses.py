"""Loss oracles and algebraic invariants of the joint objective."""

import numpy as np
import pytest

from flowcast.autodiff import Tensor
from flowcast.losses import LossWeights, loss_final, loss_gdl, loss_l1, loss_of, loss_st


class TestLossOf:
    def test_identical_flows_zero(self, rng):
        f = Tensor(rng.standard_normal((1, 2, 4, 4)))
        assert loss_of(f, f).item() == 0.0

    def test_zeros_vs_ones_is_one(self):
        assert loss_of(Tensor(np.zeros((2, 2))), Tensor(np.ones((2, 2)))).item() == 1.0

    def test_quadratic_scaling(self, rng):
        a = Tensor(rng.standard_normal((3, 3)))
        b = Tensor(rng.standard_normal((3, 3)))
        base = loss_of(a, b).item()
        scaled = loss_of(a * 3.0, b * 3.0).item()
        np.testing.assert_allclose(scaled, 9.0 * base, rtol=1e-12)


class TestLossL1:
    def test_identical_zero(self, rng):
        x = Tensor(rng.random((2, 3)))
        assert loss_l1(x, x).item() == 0.0

    def test_zeros_vs_ones(self):
        assert loss_l1(Tensor(np.zeros(5)), Tensor(np.ones(5))).item() == 1.0

    def test_symmetry(self, rng):
        a, b = Tensor(rng.random((4, 4))), Tensor(rng.random((4, 4)))
        assert loss_l1(a, b).item() == loss_l1(b, a).item()


class TestLossGdl:
    def test_identical_zero(self, rng):
        x = Tensor(rng.random((1, 3, 5, 5)))
        assert loss_gdl(x, x, 1.0).item() == 0.0

    def test_hand_oracle_two_by_two(self):
        # vertical terms |2-0| and |3-1| give 4, horizontal |0-1| and |2-3| give 2
        target = Tensor(np.array([[0.0, 1.0], [2.0, 3.0]]))
        assert loss_gdl(Tensor(np.zeros((2, 2))), target, 1.0).item() == 6.0

    def test_constant_offset_invariance(self, rng):
        a = Tensor(rng.random((1, 2, 6, 6)))
        b = Tensor(rng.random((1, 2, 6, 6)))
        base = loss_gdl(a, b, 1.0).item()
        shifted = loss_gdl(a + 0.35, b + 0.35, 1.0).item()
        np.testing.assert_allclose(shifted, base, atol=1e-12)

    def test_batch_mean_reduction(self, rng):
        single = rng.random((1, 1, 4, 4))
        target = rng.random((1, 1, 4, 4))
        doubled = loss_gdl(
            Tensor(np.concatenate([single, single])), Tensor(np.concatenate([target, target])), 1.0
        ).item()
        np.testing.assert_allclose(doubled, loss_gdl(Tensor(single), Tensor(target), 1.0).item(), rtol=1e-12)


class TestLossSt:
    def test_identical_zero(self, rng):
        x = Tensor(rng.random((1, 1, 4, 4)))
        assert loss_st(x, x, 1.0).item() == 0.0

    def test_is_sum_of_components(self, rng):
        a = Tensor(rng.random((1, 2, 5, 5)))
        b = Tensor(rng.random((1, 2, 5, 5)))
        total = loss_st(a, b, 1.0).item()
        assert total == loss_l1(a, b).item() + loss_gdl(a, b, 1.0).item()

    def test_alpha_passthrough(self, rng):
        a = Tensor(rng.random((1, 1, 4, 4)))
        b = Tensor(rng.random((1, 1, 4, 4)))
        assert loss_st(a, b, 2.0).item() == loss_l1(a, b).item() + loss_gdl(a, b, 2.0).item()


class TestLossFinal:
    def test_unit_weights_sum(self, rng):
        pf, tf = Tensor(rng.random((1, 3, 4, 4))), Tensor(rng.random((1, 3, 4, 4)))
        pfl, tfl = Tensor(rng.random((1, 2, 4, 4))), Tensor(rng.random((1, 2, 4, 4)))
        w = LossWeights()
        total = loss_final(pf, tf, pfl, tfl, w).item()
        expected = loss_of(pfl, tfl).item() + loss_st(pf, tf, 1.0).item()
        assert total == expected

    def test_zero_flow_weight(self, rng):
        pf, tf = Tensor(rng.random((1, 1, 4, 4))), Tensor(rng.random((1, 1, 4, 4)))
        pfl, tfl = Tensor(rng.random((2, 2))), Tensor(rng.random((2, 2)))
        w = LossWeights(lambda_of=0.0, lambda_st=2.0)
        np.testing.assert_allclose(
            loss_final(pf, tf, pfl, tfl, w).item(), 2.0 * loss_st(pf, tf, 1.0).item(), rtol=1e-15
        )

    def test_perfect_predictions_zero(self, rng):
        f = Tensor(rng.random((1, 3, 4, 4)))
        fl = Tensor(rng.random((1, 2, 4, 4)))
        assert loss_final(f, f, fl, fl, LossWeights()).item() == 0.0

    def test_linear_in_weights_to_one_ulp(self, rng):
        for _ in range(100):
            pf, tf = Tensor(rng.random((1, 1, 5, 5))), Tensor(rng.random((1, 1, 5, 5)))
            pfl, tfl = Tensor(rng.random((1, 2, 5, 5))), Tensor(rng.random((1, 2, 5, 5)))
            lo, ls = float(rng.uniform(0, 3)), float(rng.uniform(0, 3))
            total = loss_final(pf, tf, pfl, tfl, LossWeights(lambda_of=lo, lambda_st=ls)).item()
            expected = lo * loss_of(pfl, tfl).item() + ls * loss_st(pf, tf, 1.0).item()
            assert abs(total - expected) <= np.spacing(expected)

    def test_semantic_mode_uses_l1_only(self, rng):
        pf, tf = Tensor(rng.random((1, 4, 4, 4))), Tensor(rng.random((1, 4, 4, 4)))
        pfl, tfl = Tensor(rng.random((1, 2, 4, 4))), Tensor(rng.random((1, 2, 4, 4)))
        w = LossWeights(mode="semantic")
        total = loss_final(pf, tf, pfl, tfl, w).item()
        assert total == loss_of(pfl, tfl).item() + loss_l1(pf, tf).item()

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_of=-0.1)
        with pytest.raises(ValueError):
            LossWeights(alpha=0.5)
        with pytest.raises(ValueError):
            LossWeights(mode="other")


class TestNonNegativity:
    def test_all_losses_non_negative(self, rng):
        for _ in range(20):
            a = Tensor(rng.standard_normal((1, 2, 5, 5)))
            b = Tensor(rng.standard_normal((1, 2, 5, 5)))
            assert loss_of(a, b).item() >= 0.0
            assert loss_l1(a, b).item() >= 0.0
            assert loss_gdl(a, b, 1.0).item() >= 0.0
            assert loss_st(a, b, 1.0).item() >= 0.0
