"""
Tests for the riskdrive command line in src/cli.py.
"""

import re

import pytest
import yaml

from src.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main


@pytest.fixture
def short_config(tmp_path):
    """Toy overrides with a short warm-up and horizon, tiny networks."""
    path = tmp_path / "short.yaml"
    path.write_text(
        yaml.safe_dump(
            {
                "highway": {"warmup": 5.0},
                "env": {"horizon_steps": 20},
                "network": {
                    "dense1": 8,
                    "dense2": 8,
                    "lstm": 4,
                    "attention_dim": 4,
                    "dense_out": 4,
                    "window": 3,
                },
                "trainer": {"horizon": 8, "minibatch": 8, "epochs": 1, "iterations": 1},
                "evaluation": {"episodes": 1},
            }
        ),
        encoding="utf-8",
    )
    return path


class TestUsage:
    """Tests for argument handling and exit codes."""

    def test_no_arguments(self, capsys):
        """Test a bare invocation prints usage and exits 1."""
        assert main([]) == EXIT_USAGE
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag(self):
        """Test an unknown option is a usage error."""
        assert main(["train", "--bogus"]) == EXIT_USAGE

    def test_missing_subcommand(self):
        """Test options without a subcommand are a usage error."""
        assert main(["--seed", "3"]) == EXIT_USAGE

    def test_print_config(self, capsys):
        """Test the resolved configuration is printed as YAML."""
        assert main(["--preset", "toy", "--print-config"]) == EXIT_OK
        printed = yaml.safe_load(capsys.readouterr().out)
        assert printed["highway"]["length"] == 500.0
        assert printed["ledgered_deviations"]
        assert printed["derived"]["effective_gamma"] == 0.99

    def test_print_config_after_subcommand(self, capsys):
        """Test shared options also work after the subcommand name."""
        assert main(["train", "--density", "dense", "--print-config"]) == EXIT_OK
        assert "arrival_rate" in capsys.readouterr().out

    def test_invalid_config_key(self, tmp_path, capsys):
        """Test a bad configuration key is a runtime error naming the key."""
        path = tmp_path / "bad.yaml"
        path.write_text("trainer:\n  gama: 0.9\n", encoding="utf-8")
        assert main(["train", "--config", str(path)]) == EXIT_RUNTIME
        assert "trainer.gama" in capsys.readouterr().err

    def test_model_policy_needs_checkpoint(self, tmp_path):
        """Test evaluating a model without a checkpoint is a usage error."""
        assert main(["evaluate", "--policy", "model", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_replay_requires_subject(self, trajectory_csv):
        """Test --subject is mandatory."""
        assert main(["replay", "--input", str(trajectory_csv)]) == EXIT_USAGE


class TestFieldmap:
    """Tests for the fieldmap subcommand."""

    def test_writes_grid(self, tmp_path):
        """Test the exported grid size and the SV's own cell."""
        assert main(["fieldmap", "--step", "5", "--out", str(tmp_path)]) == EXIT_OK
        lines = (tmp_path / "fieldmap.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0] == "x,y,force"
        assert len(lines) == 1 + 21 * 5
        assert "0,0,inf" in lines

    def test_invalid_step(self, tmp_path):
        """Test a zero step is a runtime error."""
        assert main(["fieldmap", "--step", "0", "--out", str(tmp_path)]) == EXIT_RUNTIME

    def test_invalid_vehicle(self, tmp_path):
        """Test a non-positive mass is a usage error."""
        assert main(["fieldmap", "--sv-mass", "-1", "--out", str(tmp_path)]) == EXIT_USAGE


class TestSimulateReplay:
    """Tests for simulate, replay and evaluate on the toy scenario."""

    def test_simulate_then_replay(self, short_config, tmp_path, capsys):
        """Test a replayed export reproduces the simulated report."""
        sim_dir = tmp_path / "sim"
        args = ["--preset", "toy", "--config", str(short_config)]
        assert main(["simulate", *args, "--seed", "2", "--duration", "1", "--out", str(sim_dir)]) == EXIT_OK
        match = re.search(r"ego (\d+)", capsys.readouterr().out)
        assert match is not None
        replay_dir = tmp_path / "replay"
        code = main(
            [
                "replay",
                *args,
                "--input",
                str(sim_dir / "trajectory.csv"),
                "--subject",
                match.group(1),
                "--out",
                str(replay_dir),
            ]
        )
        assert code == EXIT_OK
        simulated = (sim_dir / "report.csv").read_text(encoding="utf-8")
        replayed = (replay_dir / "report.csv").read_text(encoding="utf-8")
        assert simulated == replayed

    def test_replay_missing_file(self, tmp_path):
        """Test an absent input file is a runtime error."""
        code = main(
            ["replay", "--input", str(tmp_path / "nope.csv"), "--subject", "0", "--out", str(tmp_path)]
        )
        assert code == EXIT_RUNTIME

    def test_replay_unknown_subject(self, trajectory_csv, tmp_path):
        """Test an absent subject id is a runtime error."""
        code = main(
            ["replay", "--input", str(trajectory_csv), "--subject", "9", "--out", str(tmp_path)]
        )
        assert code == EXIT_RUNTIME

    def test_evaluate_idle(self, short_config, tmp_path):
        """Test the idle baseline writes its report and event tables."""
        code = main(
            [
                "evaluate",
                "--preset",
                "toy",
                "--config",
                str(short_config),
                "--policy",
                "idle",
                "--episodes",
                "2",
                "--out",
                str(tmp_path),
            ]
        )
        assert code == EXIT_OK
        assert len((tmp_path / "report.csv").read_text(encoding="utf-8").splitlines()) == 3
        assert (tmp_path / "events.csv").exists()

    @pytest.mark.integration
    def test_train_then_evaluate_model(self, short_config, tmp_path):
        """Test a trained checkpoint can be evaluated."""
        args = ["--preset", "toy", "--config", str(short_config)]
        assert main(["train", *args, "--out", str(tmp_path / "run")]) == EXIT_OK
        checkpoint = tmp_path / "run" / "final.bin"
        assert checkpoint.exists()
        assert (tmp_path / "run" / "learning_curve.csv").exists()
        code = main(
            ["evaluate", *args, "--checkpoint", str(checkpoint), "--out", str(tmp_path / "eval")]
        )
        assert code == EXIT_OK

    def test_checkpoint_layout_mismatch(self, short_config, tmp_path):
        """Test a checkpoint loaded with the wrong layout is a runtime error."""
        args = ["--preset", "toy", "--config", str(short_config)]
        assert main(["train", *args, "--out", str(tmp_path / "run")]) == EXIT_OK
        code = main(
            [
                "evaluate",
                *args,
                "--no-attention",
                "--checkpoint",
                str(tmp_path / "run" / "final.bin"),
                "--out",
                str(tmp_path / "eval"),
            ]
        )
        assert code == EXIT_RUNTIME


class TestGradcheckCommand:
    """Tests for the gradcheck subcommand."""

    def test_single_component(self, capsys):
        """Test a passing component exits 0."""
        assert main(["gradcheck", "--module", "dense", "--trials", "3"]) == EXIT_OK
        assert "dense" in capsys.readouterr().out

    def test_invalid_trials(self):
        """Test a non-positive trial count is a usage error."""
        assert main(["gradcheck", "--trials", "0"]) == EXIT_USAGE
