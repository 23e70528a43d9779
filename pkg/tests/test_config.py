"""
Tests for configuration functions.

This module tests environment loading, logging setup, the run
configuration tree, presets and YAML loading.
"""

import logging
import math
import os
from pathlib import Path
from unittest.mock import patch

import pytest
import yaml

from src.config import (
    DENSITY_PRESETS,
    LEDGERED_DEVIATIONS,
    RiskFieldParams,
    RunConfig,
    TrainerConfig,
    arrival_rate_for_density,
    build_run_config,
    dump_run_config,
    get_working_directory,
    load_env,
    load_run_config,
    setup_logging,
)
from src.errors import ConfigError


class TestGetWorkingDirectory:
    """Tests for get_working_directory function."""

    def test_returns_cwd_without_override(self):
        """Test returns current working directory when no override is set."""
        with patch.dict(os.environ, {}, clear=True):
            assert get_working_directory() == Path.cwd()

    def test_honours_override(self, tmp_path):
        """Test returns the RISKDRIVE_WORKDIR directory when set."""
        with patch.dict(os.environ, {"RISKDRIVE_WORKDIR": str(tmp_path)}):
            assert get_working_directory() == tmp_path

    def test_returns_path_object(self):
        """Test returns a Path object."""
        assert isinstance(get_working_directory(), Path)


class TestLoadEnv:
    """Tests for load_env function."""

    def test_load_env_succeeds(self):
        """Test load_env runs without error."""
        load_env()

    def test_does_not_override_existing_variables(self):
        """Test an existing variable survives load_env."""
        with patch.dict(os.environ, {"LOG_LEVEL": "DEBUG"}):
            load_env()
            assert os.environ["LOG_LEVEL"] == "DEBUG"


class TestSetupLogging:
    """Tests for setup_logging function."""

    def test_sets_root_level(self):
        """Test the root logger receives the requested level."""
        with patch.dict(os.environ, {}, clear=True):
            setup_logging("WARNING")
            assert logging.getLogger().level == logging.WARNING
            setup_logging("INFO")

    def test_rejects_unknown_level(self):
        """Test an invalid level name raises ValueError."""
        with patch.dict(os.environ, {}, clear=True), pytest.raises(ValueError, match="Invalid log level"):
            setup_logging("LOUD")

    def test_environment_overrides_argument(self):
        """Test LOG_LEVEL takes precedence over the argument."""
        with patch.dict(os.environ, {"LOG_LEVEL": "ERROR"}):
            setup_logging("DEBUG")
            assert logging.getLogger().level == logging.ERROR
        with patch.dict(os.environ, {}, clear=True):
            setup_logging("INFO")


class TestDensity:
    """Tests for density presets and arrival rates."""

    def test_presets_match_experiment_densities(self):
        """Test the three densities used in the experiments."""
        assert DENSITY_PRESETS == {"sparse": 11.52, "medium": 25.57, "dense": 32.91}

    def test_arrival_rate_is_flow(self):
        """Test flow = density * speed, in vehicles per second."""
        assert arrival_rate_for_density(25.0, 20.0) == pytest.approx(0.5)

    def test_negative_inputs_rejected(self):
        """Test negative density raises ValueError."""
        with pytest.raises(ValueError, match="non-negative"):
            arrival_rate_for_density(-1.0, 20.0)

    def test_with_density_updates_arrival_rate(self):
        """Test with_density replaces only the arrival rate."""
        cfg = RunConfig().with_density("dense")
        expected = arrival_rate_for_density(32.91, cfg.highway.initial_speed)
        assert cfg.highway.arrival_rate == pytest.approx(expected)
        assert cfg.highway.length == RunConfig().highway.length

    def test_unknown_density_rejected(self):
        """Test an unknown density name raises ConfigError."""
        with pytest.raises(ConfigError, match="unknown density"):
            RunConfig().with_density("gridlock")


class TestRunConfigDefaults:
    """Tests for the default run configuration."""

    def test_scenario_defaults(self):
        """Test the highway scenario defaults."""
        highway = RunConfig().highway
        assert highway.length == 2800.0
        assert highway.lane_count == 3
        assert highway.heavy_fraction == 0.25
        assert highway.arrival_rate == 1.2
        assert highway.warmup == 115.0
        assert highway.speed_limit == pytest.approx(33.333333, rel=1e-6)
        assert highway.initial_speed == 20.0
        assert highway.dt == 0.1

    def test_reward_weights(self):
        """Test reward weights 1, 2, 0.5, 100, 100."""
        assert RunConfig().reward.weights == (1.0, 2.0, 0.5, 100.0, 100.0)

    def test_thresholds(self):
        """Test conflict thresholds 3 s, 3 m/s^2 and 2 s."""
        thresholds = RunConfig().thresholds
        assert (thresholds.ttc, thresholds.drac, thresholds.pet) == (3.0, 3.0, 2.0)

    def test_trainer_defaults(self):
        """Test the HPPO hyperparameter defaults."""
        trainer = RunConfig().trainer
        assert trainer.gamma == 0.99
        assert trainer.gae_lambda == 0.95
        assert trainer.clip_eps == 0.2
        assert trainer.minibatch == 4
        assert trainer.lr == 3e-4
        assert trainer.clip_norm == 0.1
        assert len(trainer.seeds) == 6

    def test_network_defaults(self):
        """Test layer widths and the log-std initial value."""
        network = RunConfig().network
        assert network.obs_dim == 43
        assert (network.dense1, network.dense2, network.lstm, network.dense_out) == (64, 128, 64, 32)
        assert network.log_std_init == pytest.approx(math.log(0.5))

    def test_config_is_frozen(self):
        """Test configuration models cannot be mutated."""
        cfg = RunConfig()
        with pytest.raises(Exception):  # noqa: B017, PT011
            cfg.highway.length = 10.0  # type: ignore[misc]


class TestTrainerConfig:
    """Tests for derived trainer values."""

    def test_equal_discount_variant(self):
        """Test equal_095 forces gamma and lambda to 0.95."""
        trainer = TrainerConfig(discount_variant="equal_095")
        assert trainer.effective_gamma == 0.95
        assert trainer.effective_lambda == 0.95

    def test_standard_variant(self):
        """Test the standard variant keeps the configured values."""
        trainer = TrainerConfig()
        assert trainer.effective_gamma == 0.99
        assert trainer.effective_lambda == 0.95

    def test_total_updates(self):
        """Test update count = iterations * epochs * ceil(batch / minibatch)."""
        trainer = TrainerConfig(horizon=10, minibatch=4, epochs=2, iterations=3, num_envs=1)
        assert trainer.updates_per_iteration() == 6
        assert trainer.total_updates() == 18

    def test_zero_horizon_gives_zero_updates(self):
        """Test an empty rollout has no optimizer steps."""
        assert TrainerConfig(horizon=0).updates_per_iteration() == 0


class TestPresets:
    """Tests for named presets."""

    def test_default_preset(self):
        """Test the default preset equals RunConfig()."""
        assert RunConfig.preset("default") == RunConfig()

    def test_toy_preset(self):
        """Test the toy scenario is a short three-lane road."""
        cfg = RunConfig.preset("toy")
        assert cfg.highway.length == 500.0
        assert cfg.highway.lane_count == 3
        assert cfg.trainer.minibatch == 64
        assert cfg.env.horizon_steps < RunConfig().env.horizon_steps

    def test_unknown_preset(self):
        """Test an unknown preset raises ConfigError."""
        with pytest.raises(ConfigError, match="unknown preset"):
            RunConfig.preset("huge")


class TestBuildRunConfig:
    """Tests for build_run_config function."""

    def test_none_gives_defaults(self):
        """Test an empty file yields the defaults."""
        assert build_run_config(None) == RunConfig()

    def test_overlays_values(self):
        """Test given values replace defaults within a section."""
        cfg = build_run_config({"trainer": {"gamma": 0.9}})
        assert cfg.trainer.gamma == 0.9
        assert cfg.trainer.gae_lambda == 0.95

    def test_unknown_key_names_path(self):
        """Test a misspelt key raises ConfigError with the dotted path."""
        with pytest.raises(ConfigError) as exc_info:
            build_run_config({"trainer": {"gama": 0.9}})
        assert exc_info.value.key_path == "trainer.gama"

    def test_unknown_section(self):
        """Test an unknown section raises ConfigError."""
        with pytest.raises(ConfigError) as exc_info:
            build_run_config({"rewards": {}})
        assert exc_info.value.key_path == "rewards"

    def test_invalid_value_names_path(self):
        """Test a constraint violation names the offending key."""
        with pytest.raises(ConfigError) as exc_info:
            build_run_config({"highway": {"lane_count": 1}})
        assert exc_info.value.key_path == "highway.lane_count"

    def test_non_mapping_root(self):
        """Test a list at the root is rejected."""
        with pytest.raises(ConfigError, match="mapping"):
            build_run_config([1, 2])  # type: ignore[arg-type]

    def test_fixed_constants_must_match(self):
        """Test edited field constants are rejected."""
        with pytest.raises(ConfigError) as exc_info:
            build_run_config({"risk_field": {"fixed_constants": {"speed_exp": 7.0}}})
        assert exc_info.value.key_path == "risk_field.fixed_constants.speed_exp"

    def test_fixed_constants_accepted_when_equal(self):
        """Test repeating the built-in constants is allowed."""
        cfg = build_run_config({"risk_field": {"fixed_constants": RiskFieldParams.fixed_constants()}})
        assert cfg.risk_field == RiskFieldParams()

    def test_informational_sections_skipped(self):
        """Test derived values and the ledger in a manifest are ignored."""
        cfg = build_run_config({"derived": {"x": 1}, "ledgered_deviations": ["a"]})
        assert cfg == RunConfig()


class TestLoadRunConfig:
    """Tests for YAML loading and dumping."""

    def test_no_path_returns_preset(self):
        """Test loading without a file returns the preset."""
        assert load_run_config(None, preset="toy") == RunConfig.preset("toy")

    def test_file_overlays_preset(self, tmp_path):
        """Test a YAML file overlays the chosen preset."""
        path = tmp_path / "run.yaml"
        path.write_text("reward:\n  risk_mode: TTC\n", encoding="utf-8")
        cfg = load_run_config(path, preset="toy")
        assert cfg.reward.risk_mode == "TTC"
        assert cfg.highway.length == 500.0

    def test_invalid_yaml(self, tmp_path):
        """Test malformed YAML raises ConfigError."""
        path = tmp_path / "bad.yaml"
        path.write_text("trainer: [unclosed\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="invalid YAML"):
            load_run_config(path)

    def test_missing_file(self, tmp_path):
        """Test a missing file raises FileNotFoundError."""
        with pytest.raises(FileNotFoundError):
            load_run_config(tmp_path / "absent.yaml")

    def test_dump_round_trips(self):
        """Test a dumped configuration loads back to the same values."""
        cfg = RunConfig.preset("toy")
        data = yaml.safe_load(dump_run_config(cfg))
        assert build_run_config(data) == cfg

    def test_dump_lists_every_ledgered_default(self):
        """Test the dump carries the ledger and the derived values."""
        data = yaml.safe_load(dump_run_config(RunConfig()))
        assert data["ledgered_deviations"] == LEDGERED_DEVIATIONS
        assert data["derived"]["effective_gamma"] == 0.99
        assert data["risk_field"]["fixed_constants"]["speed_exp"] == 6.687


SHIPPED_CONFIGS = sorted((Path(__file__).parent.parent / "data" / "configs").glob("*.yaml"))


class TestShippedConfigs:
    """Tests that every configuration under data/configs loads."""

    @pytest.mark.parametrize("path", SHIPPED_CONFIGS, ids=lambda p: p.stem)
    @pytest.mark.parametrize("preset", ["default", "toy"])
    def test_loads_on_every_preset(self, path, preset):
        """Test the overlay validates against both presets."""
        cfg = load_run_config(path, preset=preset)
        assert cfg != RunConfig.preset(preset)

    def test_ttc_overlay(self):
        """Test the TTC overlay switches only the risk mode."""
        cfg = load_run_config(Path(__file__).parent.parent / "data/configs/ttc_reward.yaml")
        assert cfg.reward.risk_mode == "TTC"
        assert cfg.trainer == TrainerConfig()
