"""
Tests for the actor/critic networks in src/networks.py.

Covers the dense layer, the LSTM cell, temporal attention, the padded
recurrent trunk, the policy model outputs and checkpoint files.
"""

import math

import numpy as np
import pytest
from scipy import special

from src.autograd import Tensor
from src.config import NetworkConfig
from src.errors import ShapeMismatch
from src.networks import (
    CHECKPOINT_MAGIC,
    AttentionWeights,
    Dense,
    LSTMWeights,
    PolicyModel,
    RecurrentState,
    attention_forward,
    load_checkpoint,
    lstm_cell,
    save_checkpoint,
)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(5)


class TestDense:
    """Tests for Dense layer."""

    def test_linear_output(self, rng):
        """Test a linear layer computes x @ W + b."""
        layer = Dense(3, 2, rng, activation="linear")
        layer.bias.data[:] = [0.5, -0.5]
        x = rng.standard_normal((4, 3))
        np.testing.assert_allclose(layer(x).data, x @ layer.weight.data + layer.bias.data)

    def test_relu_output_non_negative(self, rng):
        """Test ReLU activations are never negative."""
        layer = Dense(3, 5, rng)
        assert (layer(rng.standard_normal((10, 3))).data >= 0.0).all()

    def test_wrong_width(self, rng):
        """Test a mismatched input width raises ShapeMismatch."""
        with pytest.raises(ShapeMismatch, match="expected 3 inputs"):
            Dense(3, 2, rng)(np.ones((1, 4)))

    def test_unknown_activation(self, rng):
        """Test an unsupported activation name is rejected."""
        with pytest.raises(ValueError, match="activation"):
            Dense(3, 2, rng, activation="gelu")


class TestLstmCell:
    """Tests for lstm_cell function."""

    def test_matches_gate_equations(self, rng):
        """Test the (i, f, o, g) gate layout against a numpy evaluation."""
        weights = LSTMWeights.init(3, 2, rng, forget_bias=1.0)
        x = rng.standard_normal((4, 3))
        h0 = rng.standard_normal((4, 2))
        c0 = rng.standard_normal((4, 2))
        z = x @ weights.w_x.data + h0 @ weights.w_h.data + weights.bias.data
        i, f, o = special.expit(z[:, 0:2]), special.expit(z[:, 2:4]), special.expit(z[:, 4:6])
        g = np.tanh(z[:, 6:8])
        c_expected = f * c0 + i * g
        h, c = lstm_cell(x, h0, c0, weights)
        np.testing.assert_allclose(c.data, c_expected)
        np.testing.assert_allclose(h.data, o * np.tanh(c_expected))

    def test_forget_bias_initialisation(self, rng):
        """Test only the forget-gate block starts with the configured bias."""
        weights = LSTMWeights.init(3, 2, rng, forget_bias=1.0)
        np.testing.assert_array_equal(weights.bias.data, [0, 0, 1, 1, 0, 0, 0, 0])

    def test_state_shape_mismatch(self, rng):
        """Test a wrongly shaped state raises ShapeMismatch."""
        weights = LSTMWeights.init(3, 2, rng)
        with pytest.raises(ShapeMismatch, match="lstm state"):
            lstm_cell(np.ones((4, 3)), np.zeros((4, 3)), np.zeros((4, 2)), weights)


class TestAttention:
    """Tests for attention_forward function."""

    def test_identical_states_return_value_projection(self, rng):
        """Test uniform attention over equal rows reproduces V."""
        weights = AttentionWeights.init(4, 3, rng)
        row = rng.standard_normal(4)
        states = np.tile(row, (5, 1))
        out = attention_forward(states, weights).data
        np.testing.assert_allclose(out, np.tile(row @ weights.w_v.data, (5, 1)))

    def test_masked_keys_are_ignored(self, rng):
        """Test a padded position does not influence valid rows."""
        weights = AttentionWeights.init(4, 3, rng)
        states = rng.standard_normal((3, 4))
        masked = attention_forward(states, weights, np.array([0.0, 1.0, 1.0])).data
        trimmed = attention_forward(states[1:], weights).data
        np.testing.assert_allclose(masked[1:], trimmed, atol=1e-12)

    def test_rows_are_convex_combinations(self, rng):
        """Test each output lies in the span of the value rows."""
        weights = AttentionWeights.init(4, 3, rng)
        states = rng.standard_normal((2, 6, 4))
        out = attention_forward(states, weights).data
        values = states @ weights.w_v.data
        assert out.shape == (2, 6, 3)
        assert (out <= values.max(axis=1, keepdims=True) + 1e-12).all()
        assert (out >= values.min(axis=1, keepdims=True) - 1e-12).all()

    def test_empty_sequence(self, rng):
        """Test an empty sequence raises ShapeMismatch."""
        with pytest.raises(ShapeMismatch, match="non-empty"):
            attention_forward(np.zeros((0, 4)), AttentionWeights.init(4, 3, rng))


class TestRecurrentState:
    """Tests for RecurrentState helpers."""

    def test_concatenate_and_take(self):
        """Test states concatenate along the batch and select rows."""
        a = RecurrentState.zeros(1, 3)
        b = RecurrentState(*(np.ones((2, 3)) for _ in range(4)))
        merged = RecurrentState.concatenate([a, b])
        assert merged.actor_h.shape == (3, 3)
        np.testing.assert_array_equal(merged.take(np.array([0])).critic_c, np.zeros((1, 3)))


class TestPolicyModel:
    """Tests for PolicyModel outputs and determinism."""

    def test_forward_actor_shapes(self, tiny_network):
        """Test head shapes and the initial log standard deviation."""
        model = PolicyModel(tiny_network, attention_enabled=True, seed=0)
        logits, means, log_stds, value = model.forward_actor(np.zeros((2, 43)))
        assert logits.shape == (3,)
        assert means.shape == (2,)
        assert value.shape == (1,)
        np.testing.assert_allclose(log_stds, [math.log(0.5)] * 2)

    def test_forward_actor_rejects_bad_history(self, tiny_network):
        """Test empty or wrongly sized histories raise ShapeMismatch."""
        model = PolicyModel(tiny_network, seed=0)
        with pytest.raises(ShapeMismatch):
            model.forward_actor(np.zeros((0, 43)))
        with pytest.raises(ShapeMismatch):
            model.forward_actor(np.zeros((2, 42)))

    def test_same_seed_same_parameters(self, tiny_network):
        """Test initialisation is deterministic for a seed."""
        first = PolicyModel(tiny_network, seed=3).snapshot()
        second = PolicyModel(tiny_network, seed=3).snapshot()
        for a, b in zip(first, second, strict=True):
            np.testing.assert_array_equal(a, b)

    def test_attention_adds_parameters(self, tiny_network):
        """Test the attention projections exist only when enabled."""
        with_attention = PolicyModel(tiny_network, attention_enabled=True, seed=0)
        without = PolicyModel(tiny_network, attention_enabled=False, seed=0)
        assert len(with_attention.parameters()) == len(without.parameters()) + 6
        assert all(p.name for p in with_attention.parameters())

    @pytest.mark.parametrize("attention", [True, False])
    def test_padding_matches_shorter_history(self, tiny_network, rng, attention):
        """Test left-padded windows equal the unpadded history."""
        model = PolicyModel(tiny_network, attention_enabled=attention, seed=1)
        history = rng.standard_normal((2, 43))
        window = np.zeros((1, 3, 43))
        window[0, 1:] = history
        mask = np.array([[0.0, 1.0, 1.0]])
        out = model.forward(window, mask, RecurrentState.zeros(1, tiny_network.lstm))
        logits, means, _, value = model.forward_actor(history)
        np.testing.assert_allclose(out.logits.data[0], logits, atol=1e-12)
        np.testing.assert_allclose(out.means.data[0], means, atol=1e-12)
        np.testing.assert_allclose(out.value.data[:1], value, atol=1e-12)

    def test_advance_changes_state(self, tiny_network, rng):
        """Test advancing the carried state with an observation."""
        model = PolicyModel(tiny_network, seed=0)
        state = model.advance(RecurrentState.zeros(1, tiny_network.lstm), rng.standard_normal((1, 43)))
        assert state.actor_h.shape == (1, tiny_network.lstm)
        assert np.abs(state.actor_h).sum() > 0.0

    def test_head_log_std_option(self, tiny_network):
        """Test state-dependent log-stds start at the configured value."""
        cfg = tiny_network.model_copy(update={"head_log_std": True})
        model = PolicyModel(cfg, seed=0)
        out = model.forward(np.zeros((2, 3, 43)), np.ones((2, 3)), RecurrentState.zeros(2, cfg.lstm))
        assert out.log_stds.shape == (2, 2)
        assert isinstance(out.value, Tensor)
        assert out.value.shape == (2,)


class TestCheckpoint:
    """Tests for save_checkpoint and load_checkpoint."""

    def test_round_trip(self, tiny_network, tmp_path):
        """Test a saved model loads into a differently seeded twin."""
        source = PolicyModel(tiny_network, seed=1)
        path = save_checkpoint(source, tmp_path / "ckpt" / "final.bin")
        target = load_checkpoint(PolicyModel(tiny_network, seed=2), path)
        for a, b in zip(source.snapshot(), target.snapshot(), strict=True):
            np.testing.assert_array_equal(a, b)
        assert path.read_bytes().startswith(CHECKPOINT_MAGIC)

    def test_layout_mismatch(self, tiny_network, tmp_path):
        """Test loading into a different architecture raises ShapeMismatch."""
        path = save_checkpoint(PolicyModel(tiny_network, attention_enabled=True), tmp_path / "a.bin")
        with pytest.raises(ShapeMismatch, match="different network layout"):
            load_checkpoint(PolicyModel(tiny_network, attention_enabled=False), path)

    def test_bad_magic(self, tiny_network, tmp_path):
        """Test a foreign file raises ShapeMismatch."""
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(ShapeMismatch, match="magic"):
            load_checkpoint(PolicyModel(tiny_network), path)

    def test_truncated_file(self, tiny_network, tmp_path):
        """Test a short payload raises ShapeMismatch."""
        path = save_checkpoint(PolicyModel(tiny_network), tmp_path / "full.bin")
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ShapeMismatch, match="expected"):
            load_checkpoint(PolicyModel(tiny_network), path)

    def test_load_arrays_shape_check(self, tiny_network):
        """Test load_arrays validates count and shapes."""
        model = PolicyModel(tiny_network)
        with pytest.raises(ShapeMismatch):
            model.load_arrays([np.zeros(1)])
        arrays = model.snapshot()
        arrays[0] = np.zeros((1, 1))
        with pytest.raises(ShapeMismatch):
            model.load_arrays(arrays)

    def test_config_changes_hash(self, tiny_network):
        """Test the layout hash depends on the network configuration."""
        other = NetworkConfig(dense1=8, dense2=8, lstm=5, attention_dim=4, dense_out=4, window=3)
        assert PolicyModel(tiny_network).spec_hash() != PolicyModel(other).spec_hash()
