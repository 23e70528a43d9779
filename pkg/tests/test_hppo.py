"""
Tests for the HPPO trainer in src/hppo.py.

The estimators and losses are compared with brute-force numpy versions and
scipy distributions; collection and training run on the tiny toy setup.
"""

import json
import math

import numpy as np
import pandas as pd
import pytest
from scipy import special, stats

from src.autograd import Parameter, Tensor, backward
from src.config import EnvConfig
from src.envmdp import branch_bounds
from src.errors import LengthMismatch, NonFiniteLoss
from src.hppo import (
    LossBreakdown,
    RecurrentContext,
    RolloutBuffer,
    RolloutCollector,
    RolloutStep,
    Trainer,
    categorical_entropy,
    categorical_log_prob,
    clipped_policy_objective,
    clipped_value_loss,
    collect_rollout,
    continuous_log_prob,
    evaluate_actions,
    gae_advantages,
    normal_entropy,
    normal_log_density,
    normalize_advantages,
    sample_hybrid_action,
    total_loss,
    train,
)
from src.envmdp import HighwayEnv
from src.models import Branch
from src.networks import PolicyModel, RecurrentState, load_checkpoint


def brute_force_gae(rewards, values, dones, gamma, lam, bootstrap):
    """Sum of discounted TD errors up to the next episode end."""
    n = len(rewards)
    next_values = list(values[1:]) + [bootstrap]
    deltas = [
        rewards[t] + gamma * next_values[t] * (0.0 if dones[t] else 1.0) - values[t]
        for t in range(n)
    ]
    advantages = []
    for t in range(n):
        total, weight = 0.0, 1.0
        for k in range(t, n):
            total += weight * deltas[k]
            if dones[k]:
                break
            weight *= gamma * lam
        advantages.append(total)
    return np.array(advantages)


def make_step(reward: float, value: float, done: bool, env_index: int) -> RolloutStep:
    return RolloutStep(
        window=np.zeros((3, 43)),
        mask=np.ones(3),
        state=RecurrentState.zeros(1, 4),
        branch=1,
        action=np.zeros(2),
        reward=reward,
        done=done,
        logp_d=0.0,
        logp_c=0.0,
        value=value,
        env_index=env_index,
    )


class TestGae:
    """Tests for gae_advantages function."""

    def test_matches_brute_force(self):
        """Test the recursion against the explicit discounted sum."""
        rng = np.random.default_rng(3)
        rewards = rng.standard_normal(12)
        values = rng.standard_normal(12)
        dones = [False] * 12
        dones[4] = dones[9] = True
        adv, returns = gae_advantages(rewards, values, dones, 0.99, 0.95, bootstrap=0.7)
        expected = brute_force_gae(rewards, values, dones, 0.99, 0.95, 0.7)
        np.testing.assert_allclose(adv, expected, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(returns, expected + values)

    def test_single_terminal_step(self):
        """Test a done step ignores the bootstrap value."""
        adv, returns = gae_advantages([1.0], [0.5], [True], 0.99, 0.95, bootstrap=100.0)
        np.testing.assert_allclose(adv, [0.5])
        np.testing.assert_allclose(returns, [1.0])

    def test_lambda_one_gives_discounted_return(self):
        """Test lambda 1 recovers Monte-Carlo returns."""
        _, returns = gae_advantages([1.0, 1.0, 1.0], [0.3, -0.2, 0.9], [False, False, True], 0.5, 1.0)
        np.testing.assert_allclose(returns, [1.75, 1.5, 1.0])

    def test_length_mismatch(self):
        """Test sequences of different lengths raise LengthMismatch."""
        with pytest.raises(LengthMismatch):
            gae_advantages([1.0, 2.0], [0.0], [False, False], 0.99, 0.95)


class TestLosses:
    """Tests for the clipped objectives and the total loss."""

    def test_policy_objective_matches_numpy(self):
        """Test the clipped surrogate against a direct evaluation."""
        rng = np.random.default_rng(8)
        logp_old = rng.normal(-1.0, 0.3, size=20)
        logp_new = logp_old + rng.normal(0.0, 0.4, size=20)
        adv = rng.standard_normal(20)
        ratio = np.exp(logp_new - logp_old)
        expected = np.mean(np.minimum(ratio * adv, np.clip(ratio, 0.8, 1.2) * adv))
        assert clipped_policy_objective(logp_new, logp_old, adv, 0.2).item() == pytest.approx(expected)

    def test_policy_objective_flat_beyond_clip(self):
        """Test a ratio above 1 + eps with positive advantage has zero gradient."""
        logp_new = Parameter(np.array([math.log(1.5)]), name="logp_new")
        (grad,) = backward(clipped_policy_objective(logp_new, np.zeros(1), np.ones(1), 0.2), [logp_new])
        np.testing.assert_array_equal(grad, [0.0])

    def test_value_loss_matches_numpy(self):
        """Test the clipped value loss against a direct evaluation."""
        rng = np.random.default_rng(9)
        v_old = rng.standard_normal(15)
        v_new = v_old + rng.normal(0.0, 0.5, size=15)
        returns = rng.standard_normal(15)
        v_clip = v_old + np.clip(v_new - v_old, -0.2, 0.2)
        expected = np.mean(np.maximum((v_new - returns) ** 2, (v_clip - returns) ** 2))
        assert clipped_value_loss(v_new, v_old, returns, 0.2).item() == pytest.approx(expected)

    def test_length_mismatch(self):
        """Test mismatched inputs raise LengthMismatch."""
        with pytest.raises(LengthMismatch):
            clipped_policy_objective(np.zeros(3), np.zeros(2), np.zeros(3), 0.2)
        with pytest.raises(LengthMismatch):
            clipped_value_loss(np.zeros(3), np.zeros(3), np.zeros(4), 0.2)

    def test_total_loss_combination(self):
        """Test -J_d - J_c + c_v * L - c_e * (H_d + H_c)."""
        assert total_loss(1.0, 2.0, 4.0, 0.5, 0.5) == pytest.approx(-1.01)
        assert total_loss(0.0, 0.0, 1.0, 1.0, 1.0, value_coeff=1.0, entropy_coeff=0.5) == pytest.approx(0.0)

    def test_normalize_advantages(self):
        """Test standardization and the single-sample case."""
        normalized = normalize_advantages(np.array([1.0, 2.0, 3.0]))
        assert normalized.mean() == pytest.approx(0.0)
        assert normalized.std() == pytest.approx(1.0, rel=1e-6)
        np.testing.assert_array_equal(normalize_advantages(np.array([4.0])), [0.0])


class TestDistributions:
    """Tests for log-probabilities and entropies of the policy heads."""

    def test_categorical(self):
        """Test branch log-probs and entropy against scipy."""
        logits = np.array([[0.1, 2.0, -1.0], [3.0, 3.0, 3.0]])
        log_probs = special.log_softmax(logits, axis=-1)
        np.testing.assert_allclose(
            categorical_log_prob(logits, np.array([1, 2])).data, [log_probs[0, 1], log_probs[1, 2]]
        )
        np.testing.assert_allclose(
            categorical_entropy(logits).data, stats.entropy(np.exp(log_probs), axis=-1)
        )

    def test_normal_density_and_entropy(self):
        """Test the Normal log-density and entropy against scipy."""
        actions = np.array([[0.3, -1.0]])
        means = np.array([[0.0, 0.5]])
        log_stds = np.array([[math.log(0.5), 0.2]])
        expected = stats.norm.logpdf(actions, loc=means, scale=np.exp(log_stds))
        np.testing.assert_allclose(normal_log_density(actions, means, log_stds).data, expected)
        np.testing.assert_allclose(
            continuous_log_prob(actions, means, log_stds).data, expected.sum(axis=-1)
        )
        np.testing.assert_allclose(
            normal_entropy(log_stds).data, stats.norm(scale=np.exp(log_stds)).entropy().sum(axis=-1)
        )

    def test_clipped_mass_tails(self):
        """Test samples beyond a bound score the Normal mass beyond it."""
        actions = np.array([[4.0, -0.7], [0.2, 0.1]])
        means = np.array([[2.5, 0.0], [0.0, 0.0]])
        log_stds = np.zeros((2, 2))
        low = np.array([[-3.0, -0.5], [-3.0, -0.5]])
        high = np.array([[3.0, 0.5], [3.0, 0.5]])
        logp = continuous_log_prob(actions, means, log_stds, "clipped_mass", low, high).data
        expected_first = stats.norm.logsf(3.0, loc=2.5) + stats.norm.logcdf(-0.5)
        expected_second = stats.norm.logpdf(0.2) + stats.norm.logpdf(0.1)
        np.testing.assert_allclose(logp, [expected_first, expected_second])

    def test_unknown_mode(self):
        """Test an unknown mode is rejected."""
        with pytest.raises(ValueError, match="log-prob mode"):
            continuous_log_prob(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 2)), "exact")


class TestSampleHybridAction:
    """Tests for sample_hybrid_action function."""

    def test_same_seed_same_draw(self):
        """Test sampling is deterministic for a seeded generator."""
        args = (np.zeros(3), np.zeros(2), np.zeros(2))
        first = sample_hybrid_action(*args, np.random.default_rng(4))
        second = sample_hybrid_action(*args, np.random.default_rng(4))
        assert first == second

    def test_log_probs_match_heads(self):
        """Test the returned log-probs score the returned sample."""
        logits = np.array([0.2, -0.4, 1.0])
        means = np.array([0.5, -0.2])
        log_stds = np.array([-0.3, 0.1])
        raw, logp_d, logp_c = sample_hybrid_action(logits, means, log_stds, np.random.default_rng(2))
        assert logp_d == pytest.approx(special.log_softmax(logits)[int(raw.branch)])
        sample = np.array([raw.a_vertical, raw.a_lateral])
        expected = stats.norm.logpdf(sample, loc=means, scale=np.exp(log_stds)).sum()
        assert logp_c == pytest.approx(expected)

    def test_branch_frequencies(self):
        """Test branches are drawn with their softmax probabilities."""
        rng = np.random.default_rng(0)
        logits = np.log(np.array([1.0, 2.0, 3.0]))
        counts = np.zeros(3)
        for _ in range(6000):
            raw, _, _ = sample_hybrid_action(logits, np.zeros(2), np.zeros(2), rng)
            counts[int(raw.branch)] += 1
        np.testing.assert_allclose(counts / 6000, [1 / 6, 2 / 6, 3 / 6], atol=0.03)

    def test_clipped_mass_uses_bounds(self):
        """Test a sample far above the box scores the upper tail."""
        env = EnvConfig()
        logits = np.array([-50.0, 50.0, -50.0])
        raw, _, logp_c = sample_hybrid_action(
            logits, np.array([100.0, 0.0]), np.array([-5.0, -5.0]), np.random.default_rng(1),
            bounds=env, mode="clipped_mass",
        )
        assert raw.branch == Branch.FOLLOWING
        low, high = branch_bounds(Branch.FOLLOWING, env)
        assert raw.a_vertical > high[0]
        std = math.exp(-5.0)
        z = (raw.a_lateral - 0.0) / std
        assert low[1] < raw.a_lateral < high[1]
        expected = special.log_ndtr((100.0 - high[0]) / std) + (-0.5 * z * z + 5.0 - 0.5 * math.log(2 * math.pi))
        assert logp_c == pytest.approx(expected)

    def test_clipped_mass_needs_bounds(self):
        """Test clipped_mass without bounds raises ValueError."""
        with pytest.raises(ValueError, match="bounds"):
            sample_hybrid_action(np.zeros(3), np.zeros(2), np.zeros(2), np.random.default_rng(0), mode="clipped_mass")


class TestRolloutBuffer:
    """Tests for RolloutBuffer estimation and batching."""

    def test_estimate_per_environment(self):
        """Test interleaved environments are estimated independently."""
        buffer = RolloutBuffer(num_envs=2)
        env0 = [(1.0, 0.2, False), (0.5, 0.1, False), (2.0, 0.3, True)]
        env1 = [(-1.0, 0.0, False), (0.0, 0.4, False), (1.0, -0.3, False)]
        for a, b in zip(env0, env1, strict=True):
            buffer.add(make_step(*a, env_index=0))
            buffer.add(make_step(*b, env_index=1))
        buffer.bootstrap[1] = 0.8
        buffer.estimate(0.9, 0.8)
        adv0, _ = gae_advantages(*zip(*env0), 0.9, 0.8)
        adv1, _ = gae_advantages(*zip(*env1), 0.9, 0.8, bootstrap=0.8)
        assert buffer.advantages is not None
        np.testing.assert_allclose(buffer.advantages[0::2], adv0)
        np.testing.assert_allclose(buffer.advantages[1::2], adv1)

    def test_batch_requires_estimate(self):
        """Test minibatches are only available after estimation."""
        buffer = RolloutBuffer()
        buffer.add(make_step(1.0, 0.0, True, 0))
        with pytest.raises(RuntimeError, match="estimate"):
            buffer.batch([0])

    def test_minibatches_cover_each_step_once(self):
        """Test a shuffled epoch visits every step exactly once."""
        buffer = RolloutBuffer()
        for i in range(7):
            buffer.add(make_step(float(i), 0.0, False, 0))
        buffer.estimate(0.99, 0.95)
        batches = list(buffer.minibatches(3, np.random.default_rng(0)))
        assert [len(b) for b in batches] == [3, 3, 1]
        assert batches[0].windows.shape == (3, 3, 43)
        assert batches[0].state.actor_h.shape == (3, 4)
        seen = sorted(float(v) for b in batches for v in b.returns - b.advantages)
        assert seen == [0.0] * 7


class TestRecurrentContext:
    """Tests for RecurrentContext window handling."""

    def test_padding_and_carry(self, tiny_network):
        """Test left padding, then carrying the oldest step into the state."""
        model = PolicyModel(tiny_network, seed=0)
        context = RecurrentContext(window=3, obs_dim=43, hidden=tiny_network.lstm)
        context.push(np.ones(43), model)
        windows, mask = context.padded()
        np.testing.assert_array_equal(mask, [0.0, 0.0, 1.0])
        np.testing.assert_array_equal(windows[2], np.ones(43))
        for _ in range(3):
            context.push(np.full(43, 2.0), model)
        _, mask = context.padded()
        np.testing.assert_array_equal(mask, [1.0, 1.0, 1.0])
        assert np.abs(context.state.actor_h).sum() > 0.0


class TestRolloutCollector:
    """Tests for rollout collection in the toy environment."""

    def test_collects_horizon_steps(self, fast_config):
        """Test one environment yields exactly horizon steps."""
        model = PolicyModel(fast_config.network, seed=0)
        buffer = collect_rollout([HighwayEnv(fast_config)], model, 10, fast_config, seed=0)
        assert len(buffer) == 10
        assert all(step.env_index == 0 for step in buffer.steps)
        assert all(step.window.shape == (3, 43) for step in buffer.steps)

    def test_deterministic_for_seed(self, fast_config):
        """Test the same seed and parameters give the same rollout."""
        model = PolicyModel(fast_config.network, seed=0)
        first = collect_rollout([HighwayEnv(fast_config)], model, 12, fast_config, seed=5)
        second = collect_rollout([HighwayEnv(fast_config)], model, 12, fast_config, seed=5)
        np.testing.assert_array_equal(first.column("reward"), second.column("reward"))
        np.testing.assert_array_equal(first.column("branch"), second.column("branch"))

    def test_two_environments_interleave(self, fast_config):
        """Test steps are stored time-major across environments."""
        model = PolicyModel(fast_config.network, seed=0)
        envs = [HighwayEnv(fast_config), HighwayEnv(fast_config)]
        buffer = RolloutCollector(envs, model, fast_config, seed=0).collect(4)
        assert [step.env_index for step in buffer.steps] == [0, 1] * 4

    def test_stored_log_probs_match_collecting_policy(self, fast_config):
        """Test buffer log-probs equal a fresh evaluation before any update."""
        model = PolicyModel(fast_config.network, seed=0)
        buffer = collect_rollout([HighwayEnv(fast_config)], model, 16, fast_config, seed=1)
        buffer.estimate(0.99, 0.95)
        batch = buffer.batch(list(range(len(buffer))))
        evaluation = evaluate_actions(model, batch, fast_config)
        np.testing.assert_allclose(evaluation.logp_d.data, batch.logp_d, atol=1e-9)
        np.testing.assert_allclose(evaluation.logp_c.data, batch.logp_c, atol=1e-9)

    def test_requires_an_environment(self, fast_config):
        """Test an empty environment list is rejected."""
        with pytest.raises(ValueError):
            RolloutCollector([], PolicyModel(fast_config.network), fast_config)


class TestTrainer:
    """Tests for the Trainer loop and its outputs."""

    def test_train_writes_outputs(self, fast_config, tmp_path):
        """Test the learning curve, manifest and checkpoints of a short run."""
        history, model = train(fast_config, seed=0, output_dir=tmp_path)
        assert [row.iteration for row in history] == [1, 2]
        assert history[0].lr == pytest.approx(3e-4 * 0.75)
        assert history[1].lr == pytest.approx(3e-4 * 0.25)
        curve = pd.read_csv(tmp_path / "learning_curve.csv")
        assert list(curve["iteration"]) == [1, 2]
        manifest = json.loads((tmp_path / "run_manifest.json").read_text(encoding="utf-8"))
        assert manifest["iterations_completed"] == 2
        assert manifest["checkpoints"] == ["checkpoint_0001.bin", "checkpoint_0002.bin", "final.bin"]
        restored = load_checkpoint(PolicyModel(fast_config.network, seed=9), tmp_path / "final.bin")
        for a, b in zip(model.snapshot(), restored.snapshot(), strict=True):
            np.testing.assert_array_equal(a, b)

    def test_training_is_reproducible(self, fast_config):
        """Test two runs with one seed produce the same curve and weights."""
        first, model_a = train(fast_config, seed=3)
        second, model_b = train(fast_config, seed=3)
        assert [r.to_dict() for r in first] == [r.to_dict() for r in second]
        for a, b in zip(model_a.snapshot(), model_b.snapshot(), strict=True):
            np.testing.assert_array_equal(a, b)

    def test_zero_iterations(self, fast_config, tmp_path):
        """Test an empty budget returns no rows but still saves the model."""
        cfg = fast_config.model_copy(
            update={"trainer": fast_config.trainer.model_copy(update={"iterations": 0})}
        )
        history, _ = train(cfg, seed=0, output_dir=tmp_path)
        assert history == []
        assert (tmp_path / "final.bin").exists()

    def test_non_finite_loss_dumps_minibatch(self, fast_config, tmp_path, monkeypatch):
        """Test a NaN loss stops training and saves the offending batch."""
        nan = float("nan")

        def broken_losses(model, batch, cfg):
            return Tensor(np.array(nan)), LossBreakdown(nan, nan, nan, nan, nan, nan)

        monkeypatch.setattr("src.hppo.compute_losses", broken_losses)
        trainer = Trainer(fast_config, seed=0, output_dir=tmp_path)
        with pytest.raises(NonFiniteLoss) as excinfo:
            trainer.run_iteration(1)
        assert excinfo.value.dump_path is not None
        assert excinfo.value.dump_path.endswith("nonfinite_minibatch_iter0001.npz")
        with np.load(excinfo.value.dump_path) as dump:
            assert "advantages" in dump.files
