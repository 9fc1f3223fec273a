"""Finite-difference verification of every differentiable operation.

Central differences at step 1e-5 on small random inputs; kink points
(relu at 0, bilinear at integer coordinates, l1/gdl ties) are avoided by
construction.  The whole suite is also the substance of acceptance
criterion 1 and must stay fast.
"""

import numpy as np
import pytest

from flowcast.autodiff import (
    Tensor,
    abs_,
    concat,
    finite_diff_check,
    moveaxis,
    pad,
    pow_scalar,
    relu,
    reshape,
    sigmoid,
    softmax,
    square,
    tanh,
    tensor_mean,
    tensor_sum,
)
from flowcast.losses import loss_gdl, loss_l1, loss_of, loss_st
from flowcast.nn import ConvLSTMGates, batch_norm, bilinear_sample, conv2d, conv3d, convlstm_cell_step

TOL = 1e-4


def check(f, x):
    assert finite_diff_check(f, x) < TOL


class TestElementwiseGradients:
    def test_identity(self, rng):
        assert finite_diff_check(lambda t: t, Tensor(rng.random(5))) < 1e-8

    def test_add_mul_chain(self, rng):
        a = Tensor(rng.standard_normal((3, 4)))
        check(lambda t: (t * a + t) * t, Tensor(rng.standard_normal((3, 4))))

    def test_square_abs_pow(self, rng):
        x = Tensor(rng.uniform(0.5, 2.0, (4, 3)))  # keep away from the abs kink
        check(square, x)
        check(abs_, x)
        check(lambda t: pow_scalar(abs_(t), 1.7), x)

    def test_activations(self, rng):
        x = Tensor(rng.uniform(0.2, 1.5, (3, 3)))  # positive: off the relu kink
        check(relu, x)
        x = Tensor(rng.standard_normal((3, 3)))
        check(sigmoid, x)
        check(tanh, x)
        check(lambda t: softmax(t, axis=1), x)

    def test_reductions_and_shape_ops(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4)))
        check(lambda t: tensor_sum(t, axis=1), x)
        check(lambda t: tensor_mean(t, axis=(0, 2)), x)
        check(lambda t: reshape(t, (6, 4)), x)
        check(lambda t: moveaxis(t, 0, 2), x)
        check(lambda t: pad(t, ((1, 0), (0, 2), (1, 1))), x)
        check(lambda t: concat([t, t * 2.0], axis=1), x)
        check(lambda t: t[:, 1:, ::2], x)


class TestKernelGradients:
    def test_conv2d_all_inputs(self, rng):
        x = Tensor(rng.standard_normal((2, 2, 5, 5)))
        w = Tensor(rng.standard_normal((3, 2, 3, 3)))
        b = Tensor(rng.standard_normal(3))
        check(lambda t: conv2d(t, w, b, 1, 1), x)
        check(lambda t: conv2d(x, t, b, 1, 1), w)
        check(lambda t: conv2d(x, w, t, 1, 1), b)

    def test_conv2d_strided(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 6, 6)))
        w = Tensor(rng.standard_normal((2, 2, 3, 3)))
        b = Tensor(np.zeros(2))
        check(lambda t: conv2d(t, w, b, 2, 1), x)

    def test_conv3d_all_inputs(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 4, 4, 4)))
        w = Tensor(rng.standard_normal((2, 2, 3, 3, 3)))
        b = Tensor(rng.standard_normal(2))
        check(lambda t: conv3d(t, w, b, 1, 1), x)
        check(lambda t: conv3d(x, t, b, 1, 1), w)
        check(lambda t: conv3d(x, w, t, 1, 1), b)

    def test_batch_norm_train_and_eval(self, rng):
        from flowcast.nn import BatchNormState

        x = Tensor(rng.standard_normal((3, 2, 4, 4)))
        gamma = Tensor(rng.uniform(0.5, 1.5, 2))
        beta = Tensor(rng.standard_normal(2))
        check(lambda t: batch_norm(t, gamma, beta), x)
        check(lambda t: batch_norm(x, t, beta), gamma)
        check(lambda t: batch_norm(x, gamma, t), beta)
        state = BatchNormState.unset(2)
        batch_norm(x, gamma, beta, state)  # record statistics
        check(lambda t: batch_norm(t, gamma, beta, state, training=False), x)

    def test_convlstm_cell(self, rng):
        gates = ConvLSTMGates(
            *(
                Tensor(rng.standard_normal((2, 3, 3, 3)) * 0.3)
                if i % 2 == 0
                else Tensor(rng.standard_normal(2) * 0.1)
                for i in range(8)
            )
        )
        x = Tensor(rng.standard_normal((1, 1, 4, 4)))
        h = Tensor(rng.standard_normal((1, 2, 4, 4)))
        c = Tensor(rng.standard_normal((1, 2, 4, 4)))

        def through_cell(t):
            hn, cn = convlstm_cell_step(t, h, c, gates)
            return hn + cn

        check(through_cell, x)
        check(lambda t: convlstm_cell_step(x, t, c, gates)[0], h)
        check(lambda t: convlstm_cell_step(x, h, t, gates)[0], c)

        def through_input_gate_weight(t):
            swapped = ConvLSTMGates(
                t, gates.b_i, gates.w_f, gates.b_f, gates.w_o, gates.b_o, gates.w_g, gates.b_g
            )
            return convlstm_cell_step(x, h, c, swapped)[0]

        check(through_input_gate_weight, gates.w_i)

    def test_bilinear_sample_both_inputs(self, rng):
        img = Tensor(rng.random((1, 2, 5, 6)))
        # fractional interior coordinates, away from the integer-lattice kinks
        cx = rng.uniform(0.3, 4.6, (4, 5)) + 0.013
        cy = rng.uniform(0.3, 3.6, (4, 5)) + 0.017
        coords = Tensor(np.stack([cx, cy])[None])
        check(lambda t: bilinear_sample(img, t), coords)
        check(lambda t: bilinear_sample(t, coords), img)


class TestLossGradients:
    def test_loss_of(self, rng):
        target = Tensor(rng.standard_normal((1, 2, 4, 4)))
        check(lambda t: loss_of(t, target), Tensor(rng.standard_normal((1, 2, 4, 4))))

    def test_loss_l1_off_kinks(self, rng):
        target = Tensor(rng.random((2, 3, 4)))
        pred = Tensor(rng.random((2, 3, 4)) + 2.0)  # strictly above target
        check(lambda t: loss_l1(t, target), pred)

    def test_loss_gdl_off_kinks(self, rng):
        # strictly monotone rows/columns keep all difference terms away from ties
        base = np.cumsum(rng.uniform(0.2, 0.5, (1, 1, 5, 5)), axis=2).cumsum(axis=3)
        target = Tensor(base)
        pred = Tensor(np.cumsum(rng.uniform(0.8, 1.3, (1, 1, 5, 5)), axis=2).cumsum(axis=3))
        check(lambda t: loss_gdl(t, target, 1.0), pred)
        check(lambda t: loss_gdl(t, target, 2.0), pred)

    def test_loss_st(self, rng):
        base = np.cumsum(rng.uniform(0.2, 0.5, (1, 1, 4, 6)), axis=2).cumsum(axis=3)
        pred = np.cumsum(rng.uniform(0.8, 1.2, (1, 1, 4, 6)), axis=2).cumsum(axis=3)
        check(lambda t: loss_st(t, Tensor(base), 1.0), Tensor(pred))
