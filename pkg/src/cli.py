"""
Command-line interface.

Subcommands:
    train      Train an HPPO policy; writes learning_curve.csv, checkpoints
               and run_manifest.json.
    evaluate   Run a policy over several seeds; writes report.csv and
               events.csv.
    replay     Compute safety metrics of logged subjects from a trajectory
               CSV; writes report.csv and events.csv.
    simulate   Run one episode and export trajectory.csv with its report.
    fieldmap   Sample the field-force magnitude around one vehicle.
    gradcheck  Compare analytic and finite-difference gradients.
    study      Train and compare the attention and reward variants.

Every subcommand accepts ``--config``, ``--preset``, ``--seed`` and
``--out``; ``--print-config`` prints the fully resolved configuration and
exits. Exit status is 0 on success, 1 on a usage error and 2 on a runtime
error.
"""

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import NoReturn, Optional

from .config import (
    DENSITY_PRESETS,
    RunConfig,
    dump_run_config,
    get_working_directory,
    load_env,
    load_run_config,
    setup_logging,
)
from .envmdp import HighwayEnv
from .errors import RiskDriveError, UsageError
from .evaluation import (
    IdlePolicy,
    ModelPolicy,
    Policy,
    RandomPolicy,
    episode_seeds,
    evaluate_policy,
    run_episode,
    summarize_reports,
    variant_study,
)
from .gradcheck import COMPONENTS, gradient_check
from .hppo import Trainer
from .models import VehicleClass, VehicleState
from .networks import PolicyModel, load_checkpoint
from .riskfield import FieldGrid, field_grid_export, write_field_grid_csv
from .trajio import (
    parse_trajectory_csv,
    read_frame_rate,
    read_road_width,
    replay_evaluate,
    write_events_csv,
    write_report_csv,
    write_trajectory_csv,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class CliArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting."""

    def error(self, message: str) -> NoReturn:
        raise UsageError(f"{self.prog}: {message}")


def _common_options(suppress: bool) -> argparse.ArgumentParser:
    """
    Options shared by the top level and every subcommand.

    Subcommand copies use SUPPRESS defaults so that values given before the
    subcommand name are not overwritten.
    """
    default = argparse.SUPPRESS if suppress else None
    parser = CliArgumentParser(add_help=False)
    parser.add_argument("--config", type=Path, default=default, help="YAML configuration file")
    parser.add_argument(
        "--preset",
        choices=["default", "toy"],
        default=default if suppress else "default",
        help="Configuration preset the file overlays",
    )
    parser.add_argument(
        "--density",
        choices=sorted(DENSITY_PRESETS),
        default=default,
        help="Ambient traffic density preset",
    )
    parser.add_argument("--seed", type=int, default=default if suppress else 0, help="Random seed")
    parser.add_argument(
        "--out", type=Path, default=default if suppress else Path("runs"), help="Output directory"
    )
    parser.add_argument(
        "--print-config",
        action="store_true",
        default=default if suppress else False,
        help="Print the resolved configuration and exit",
    )
    return parser


def build_parser() -> CliArgumentParser:
    """Assemble the argument parser with every subcommand."""
    parser = CliArgumentParser(
        prog="riskdrive",
        description="Risk-field driving simulator, HPPO trainer and safety metrics",
        parents=[_common_options(suppress=False)],
    )
    common = _common_options(suppress=True)
    sub = parser.add_subparsers(dest="command", parser_class=CliArgumentParser)

    train = sub.add_parser("train", parents=[common], help="Train an HPPO policy")
    train.add_argument("--iterations", type=int, help="Override trainer.iterations")
    train.add_argument("--horizon", type=int, help="Override trainer.horizon")
    train.add_argument(
        "--no-attention", action="store_true", help="Disable the temporal attention layer"
    )

    evaluate = sub.add_parser("evaluate", parents=[common], help="Evaluate a policy")
    evaluate.add_argument("--policy", choices=["model", "random", "idle"], default="model")
    evaluate.add_argument("--checkpoint", type=Path, help="Checkpoint for --policy model")
    evaluate.add_argument("--episodes", type=int, help="Number of episodes")
    evaluate.add_argument(
        "--stochastic", action="store_true", help="Sample actions instead of acting greedily"
    )
    evaluate.add_argument(
        "--no-attention", action="store_true", help="Checkpoint was trained without attention"
    )

    replay = sub.add_parser("replay", parents=[common], help="Replay a trajectory CSV")
    replay.add_argument("--input", type=Path, required=True, help="Trajectory CSV")
    replay.add_argument(
        "--subject", type=int, action="append", required=True, help="Subject vehicle id"
    )
    replay.add_argument("--dt", type=float, help="Resample to this step in seconds")

    simulate = sub.add_parser("simulate", parents=[common], help="Simulate and export one episode")
    simulate.add_argument("--duration", type=float, help="Episode length cap in seconds")
    simulate.add_argument("--policy", choices=["idle", "random"], default="idle")

    fieldmap = sub.add_parser("fieldmap", parents=[common], help="Export a field-force grid")
    fieldmap.add_argument("--x-start", type=float, default=-50.0)
    fieldmap.add_argument("--x-stop", type=float, default=50.0)
    fieldmap.add_argument("--y-start", type=float, default=-10.0)
    fieldmap.add_argument("--y-stop", type=float, default=10.0)
    fieldmap.add_argument("--step", type=float, default=1.0)
    fieldmap.add_argument("--sv-speed", type=float, default=20.0)
    fieldmap.add_argument("--sv-accel", type=float, default=0.0)
    fieldmap.add_argument("--sv-mass", type=float, default=1500.0)
    fieldmap.add_argument("--sv-class", choices=["light", "heavy"], default="light")
    fieldmap.add_argument("--ov-speed", type=float, default=15.0)
    fieldmap.add_argument("--ov-mass", type=float, default=1500.0)
    fieldmap.add_argument("--ov-class", choices=["light", "heavy"], default="light")

    gradcheck = sub.add_parser("gradcheck", parents=[common], help="Run the gradient check")
    gradcheck.add_argument("--module", choices=["all", *COMPONENTS], default="all")
    gradcheck.add_argument("--trials", type=int, default=100)

    study = sub.add_parser("study", parents=[common], help="Compare training variants")
    study.add_argument("--seeds", type=int, nargs="+", help="Training seeds")
    study.add_argument("--episodes", type=int, help="Evaluation episodes per trained model")

    return parser


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_run_config(args.config, preset=args.preset)
    if args.density is not None:
        cfg = cfg.with_density(args.density)
    return cfg


def _output_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    return out if out.is_absolute() else get_working_directory() / out


def _with_trainer(cfg: RunConfig, **changes: object) -> RunConfig:
    updates = {k: v for k, v in changes.items() if v is not None}
    if not updates:
        return cfg
    return cfg.model_copy(update={"trainer": cfg.trainer.model_copy(update=updates)})


def _cmd_train(args: argparse.Namespace, cfg: RunConfig) -> int:
    cfg = _with_trainer(
        cfg,
        iterations=args.iterations,
        horizon=args.horizon,
        attention_enabled=False if args.no_attention else None,
    )
    out = _output_dir(args)
    trainer = Trainer(cfg, seed=args.seed, output_dir=out)
    history = trainer.train()
    final = history[-1].mean_return if history else float("nan")
    print(f"Trained {len(history)} iterations; final mean return {final:.3f}")
    print(f"Outputs written to {out}")
    return EXIT_OK


def _build_policy(args: argparse.Namespace, cfg: RunConfig) -> Policy:
    if args.policy == "idle":
        return IdlePolicy()
    if args.policy == "random":
        return RandomPolicy(cfg.env)
    if args.checkpoint is None:
        raise UsageError("--checkpoint is required with --policy model")
    model = PolicyModel(cfg.network, attention_enabled=not args.no_attention, seed=args.seed)
    load_checkpoint(model, args.checkpoint)
    greedy = cfg.evaluation.greedy and not args.stochastic
    return ModelPolicy(model, cfg, greedy=greedy)


def _cmd_evaluate(args: argparse.Namespace, cfg: RunConfig) -> int:
    policy = _build_policy(args, cfg)
    episodes = args.episodes if args.episodes is not None else cfg.evaluation.episodes
    if episodes <= 0:
        raise UsageError("--episodes must be positive")
    outcomes = evaluate_policy(cfg, policy, episode_seeds(args.seed, episodes))
    out = _output_dir(args)
    write_report_csv([o.report for o in outcomes], out / "report.csv")
    write_events_csv(
        [(i, event) for i, o in enumerate(outcomes) for event in o.events], out / "events.csv"
    )
    print(summarize_reports([o.report for o in outcomes]).to_string(index=False))
    return EXIT_OK


def _cmd_replay(args: argparse.Namespace, cfg: RunConfig) -> int:
    records = parse_trajectory_csv(args.input, highway=cfg.highway)
    results = replay_evaluate(
        records,
        cfg.risk_field,
        cfg.thresholds,
        subject_ids=args.subject,
        frame_rate=read_frame_rate(args.input),
        dt=args.dt,
        road_width=read_road_width(args.input),
        adr_range=cfg.env.adr_range,
        perception_range=cfg.env.perception_range,
    )
    out = _output_dir(args)
    reports = [results[subject][0] for subject in args.subject]
    write_report_csv(reports, out / "report.csv")
    write_events_csv(
        [(i, event) for i, subject in enumerate(args.subject) for event in results[subject][1]],
        out / "events.csv",
    )
    for subject, report in zip(args.subject, reports, strict=True):
        print(f"vehicle {subject}: {json.dumps(report.to_dict())}")
    return EXIT_OK


def _cmd_simulate(args: argparse.Namespace, cfg: RunConfig) -> int:
    policy: Policy = RandomPolicy(cfg.env) if args.policy == "random" else IdlePolicy()
    max_steps = None
    if args.duration is not None:
        if args.duration <= 0:
            raise UsageError("--duration must be positive")
        max_steps = max(1, int(round(args.duration / cfg.highway.dt)))
    outcome = run_episode(HighwayEnv(cfg), policy, args.seed, max_steps=max_steps)
    out = _output_dir(args)
    write_trajectory_csv(outcome.log, out / "trajectory.csv")
    write_report_csv([outcome.report], out / "report.csv")
    write_events_csv([(0, event) for event in outcome.events], out / "events.csv")
    print(
        f"Simulated {outcome.steps} steps (ego {outcome.log.subject_id}, "
        f"end: {outcome.reason}); outputs written to {out}"
    )
    return EXIT_OK


def _cmd_fieldmap(args: argparse.Namespace, cfg: RunConfig) -> int:
    def vehicle(vclass: str, mass: float, speed: float, accel: float) -> VehicleState:
        klass = VehicleClass(vclass)
        length, width = (
            cfg.highway.heavy_size if klass == VehicleClass.HEAVY else cfg.highway.light_size
        )
        return VehicleState(
            position_x=0.0,
            position_y=0.0,
            speed=speed,
            heading=0.0,
            acceleration=accel,
            mass=mass,
            vclass=klass,
            length=length,
            width=width,
        )

    try:
        sv = vehicle(args.sv_class, args.sv_mass, args.sv_speed, args.sv_accel)
        ov = vehicle(args.ov_class, args.ov_mass, args.ov_speed, 0.0)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    grid = FieldGrid(args.x_start, args.x_stop, args.y_start, args.y_stop, args.step)
    frame = field_grid_export(sv, cfg.risk_field, grid, ov)
    path = write_field_grid_csv(frame, _output_dir(args) / "fieldmap.csv")
    print(f"Field grid of {len(frame)} cells written to {path}")
    return EXIT_OK


def _cmd_gradcheck(args: argparse.Namespace, cfg: RunConfig) -> int:
    if args.trials <= 0:
        raise UsageError("--trials must be positive")
    report = gradient_check(args.module, trials=args.trials, seed=args.seed)
    for name, result in report.results.items():
        status = "ok" if result.passed else "FAILED"
        print(
            f"{name:18s} max rel err {result.max_relative_error:.3e} "
            f"(tol {result.tolerance:.0e}) {status}"
        )
    return EXIT_OK if report.passed else EXIT_RUNTIME


def _cmd_study(args: argparse.Namespace, cfg: RunConfig) -> int:
    seeds = args.seeds or list(cfg.trainer.seeds)
    episodes = args.episodes if args.episodes is not None else cfg.evaluation.episodes
    results, checks = variant_study(
        cfg, seeds, episode_seeds(cfg.evaluation.seeds[0], episodes), _output_dir(args)
    )
    for name, result in results.items():
        print(f"{name}: final returns {result.final_returns}, PCEC {result.pcec}")
    for check in checks:
        mean, low, high = check.difference
        verdict = "holds" if check.holds else "does not hold"
        print(f"{check.description}: {verdict} (diff {mean:.3f}, 95% CI [{low:.3f}, {high:.3f}])")
    return EXIT_OK


COMMANDS = {
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "replay": _cmd_replay,
    "simulate": _cmd_simulate,
    "fieldmap": _cmd_fieldmap,
    "gradcheck": _cmd_gradcheck,
    "study": _cmd_study,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Entry point of the ``riskdrive`` command.

    Args:
        argv: Arguments without the program name; defaults to sys.argv[1:].

    Returns:
        int: 0 on success, 1 on a usage error, 2 on a runtime error.
    """
    load_env()
    setup_logging()
    parser = build_parser()
    arguments = list(sys.argv[1:] if argv is None else argv)
    if not arguments:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    try:
        args = parser.parse_args(arguments)
        if args.print_config:
            print(dump_run_config(_resolve_config(args)), end="")
            return EXIT_OK
        if args.command is None:
            raise UsageError("a subcommand is required")
        cfg = _resolve_config(args)
        logger.info("Dispatching command", extra={"command": args.command, "seed": args.seed})
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RiskDriveError, OSError) as exc:
        logger.error("Command failed", extra={"error": str(exc)})
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
