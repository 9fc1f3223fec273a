"""Checkpoint container: round trips, canonical bytes, corruption rejection."""

from fractions import Fraction

import numpy as np
import pytest

from flowcast.checkpoint import load_checkpoint, save_checkpoint
from flowcast.errors import FormatError
from flowcast.model import ModelConfig, init_params
from flowcast.train import AdamState

CONFIG = ModelConfig(mode="rgb", n_input=3, channel_scale=Fraction(1, 16), height=8, width=8)


def params_with_noise(rng):
    params = init_params(5, CONFIG)
    for state in params.bn.values():
        state.mean[...] = rng.standard_normal(state.mean.shape)
        state.var[...] = rng.random(state.var.shape) + 0.5
        state.updates = 3
    return params


class TestRoundTrip:
    def test_params_and_optimizer_bitwise(self, rng, tmp_path):
        params = params_with_noise(rng)
        adam = AdamState.for_params(params, lr=2e-3)
        for name in adam.m:
            adam.m[name][...] = rng.standard_normal(adam.m[name].shape)
            adam.v[name][...] = rng.random(adam.v[name].shape)
        adam.t = 17
        path = tmp_path / "model.ckpt"
        save_checkpoint(params, adam, path)
        loaded, loaded_adam = load_checkpoint(path)

        assert loaded.config == params.config
        for name in params.tensors:
            np.testing.assert_array_equal(loaded.tensors[name].data, params.tensors[name].data)
            assert loaded.tensors[name].requires_grad
        for name in params.bn:
            np.testing.assert_array_equal(loaded.bn[name].mean, params.bn[name].mean)
            np.testing.assert_array_equal(loaded.bn[name].var, params.bn[name].var)
            assert loaded.bn[name].updates == params.bn[name].updates
        assert loaded_adam.t == 17 and loaded_adam.lr == 2e-3
        for name in adam.m:
            np.testing.assert_array_equal(loaded_adam.m[name], adam.m[name])
            np.testing.assert_array_equal(loaded_adam.v[name], adam.v[name])

    def test_save_load_save_identical_bytes(self, rng, tmp_path):
        params = params_with_noise(rng)
        adam = AdamState.for_params(params)
        first = tmp_path / "a.ckpt"
        second = tmp_path / "b.ckpt"
        save_checkpoint(params, adam, first)
        loaded, loaded_adam = load_checkpoint(first)
        save_checkpoint(loaded, loaded_adam, second)
        assert first.read_bytes() == second.read_bytes()

    def test_without_optimizer_state(self, rng, tmp_path):
        params = params_with_noise(rng)
        path = tmp_path / "bare.ckpt"
        save_checkpoint(params, None, path)
        loaded, loaded_adam = load_checkpoint(path)
        assert loaded_adam is None
        assert loaded.config.channel_scale == Fraction(1, 16)


class TestCorruption:
    def test_bad_magic_rejected(self, rng, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(params_with_noise(rng), None, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_flipped_payload_byte_fails_crc(self, rng, tmp_path):
        path = tmp_path / "c.ckpt"
        save_checkpoint(params_with_noise(rng), None, path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="checksum"):
            load_checkpoint(path)

    def test_truncated_rejected(self, rng, tmp_path):
        path = tmp_path / "t.ckpt"
        save_checkpoint(params_with_noise(rng), None, path)
        path.write_bytes(path.read_bytes()[: len(path.read_bytes()) // 2])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_not_a_checkpoint_at_all(self, tmp_path):
        path = tmp_path / "noise.ckpt"
        path.write_bytes(b"hello world")
        with pytest.raises(FormatError):
            load_checkpoint(path)
