"""Adam optimizer update rules."""

import numpy as np
import pytest

from flowcast.autodiff import Tensor
from flowcast.train import AdamState, adam_step


def tiny_params(rng):
    return {
        "a": Tensor(rng.standard_normal((3, 3)), requires_grad=True),
        "b": Tensor(rng.standard_normal(4), requires_grad=True),
    }


def state_for(params, **kw):
    return AdamState(
        m={k: np.zeros(t.shape) for k, t in params.items()},
        v={k: np.zeros(t.shape) for k, t in params.items()},
        **kw,
    )


class TestAdamStep:
    def test_zero_gradient_is_noop_any_time(self, rng):
        params = tiny_params(rng)
        state = state_for(params)
        before = {k: np.array(t.data) for k, t in params.items()}
        zeros = {k: np.zeros(t.shape) for k, t in params.items()}
        for _ in range(5):
            adam_step(params, zeros, state)
        assert state.t == 5
        for k in params:
            np.testing.assert_array_equal(params[k].data, before[k])

    def test_first_step_magnitude_near_lr(self, rng):
        params = tiny_params(rng)
        state = state_for(params, lr=1e-3)
        before = {k: np.array(t.data) for k, t in params.items()}
        ones = {k: np.ones(t.shape) for k, t in params.items()}
        adam_step(params, ones, state)
        # m_hat = 1, v_hat = 1: update = lr / sqrt(1 + eps)
        expected = 1e-3 / np.sqrt(1.0 + state.epsilon)
        for k in params:
            np.testing.assert_allclose(before[k] - params[k].data, expected, rtol=1e-12)

    def test_first_step_sign_follows_gradient(self, rng):
        params = tiny_params(rng)
        state = state_for(params)
        grads = {k: rng.standard_normal(t.shape) for k, t in params.items()}
        before = {k: np.array(t.data) for k, t in params.items()}
        adam_step(params, grads, state)
        for k in params:
            moved = params[k].data - before[k]
            mask = grads[k] != 0
            assert np.all(np.sign(moved[mask]) == -np.sign(grads[k][mask]))

    def test_missing_gradient_treated_as_zero(self, rng):
        params = tiny_params(rng)
        state = state_for(params)
        before_b = np.array(params["b"].data)
        adam_step(params, {"a": np.ones((3, 3))}, state)
        np.testing.assert_array_equal(params["b"].data, before_b)

    def test_second_moment_nonnegative(self, rng):
        params = tiny_params(rng)
        state = state_for(params)
        for _ in range(10):
            grads = {k: rng.standard_normal(t.shape) for k, t in params.items()}
            adam_step(params, grads, state)
        for k in params:
            assert (state.v[k] >= 0).all()
