"""
Configuration, environment and logging setup.

This module centralizes everything that is configurable in a run:

- ``load_env()`` reads a ``.env`` file at the project root (python-dotenv).
- ``setup_logging()`` configures the root logger once per process.
- A tree of strict, frozen pydantic models describes the highway, the ambient
  driver models, the risk field, the decision environment, the reward, the
  conflict thresholds, the networks and the trainer. Unknown keys are rejected
  so that every run manifest lists exactly the values that were used.

The module follows these principles:
- Single responsibility: only configuration and logging live here
- Explicit errors: invalid keys raise ConfigError naming the dotted key path
- Totality: every parameter has a concrete default that ends up in manifests
"""

import logging
import math
import os
from pathlib import Path
from typing import Any, ClassVar, Literal, Optional

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel as PydanticBaseModel
from pydantic import ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

logger = logging.getLogger(__name__)

# Traffic densities used in the experiments, vehicles per kilometre.
DENSITY_PRESETS: dict[str, float] = {
    "sparse": 11.52,
    "medium": 25.57,
    "dense": 32.91,
}

# Informational sections written into manifests and skipped on load.
INFORMATIONAL_SECTIONS = frozenset({"derived", "ledgered_deviations"})

# Modelling choices made where the formulation leaves a value open.
LEDGERED_DEVIATIONS: list[str] = [
    "ambient traffic uses IDM car-following and MOBIL lane changing instead of Krauss/LC2013",
    "risk-field coefficients T_light=1.0, T_heavy=0.6, beta1=beta2=beta3=0.05, lambda=1.0, tau=0.2 are placeholders",
    "pseudo-distance exponent coefficient defaults to tau",
    "field-force speed term uses the emitting vehicle's speed as printed; force_speed_from_ov switches to the receiver",
    "vehicle masses drawn uniformly: light 1000-2000 kg, heavy 10000-40000 kg",
    "simulation step dt=0.1 s",
    "ambient lane changes are a 3 s cosine lateral ramp",
    "reward normalization: distances by 50 m, speeds by the speed limit, ADR by a per-episode running maximum",
    "position term is the absolute lateral offset from the current lane centre",
    "TTC reward mode uses clamp(ttc_threshold / TTC, 0, 1) against the same-lane leader",
    "action bounds a_long_max=3, a_lat_max=2, a_keep=0.5 m/s^2",
    "episode horizon 600 steps (60 s)",
    "discrete head emits 3 logits",
    "continuous log-stds are state-independent parameters initialised to ln 0.5",
    "gradient clipping is global-norm clipping at 0.1",
    "history window of 8 steps; older context enters through a carried LSTM state",
    "attention output is mean-pooled over the valid window positions",
    "minimized loss -J_d - J_c + 0.5 L_BL - 0.01 (H_d + H_c)",
    "advantages normalized per minibatch",
    "clipped-normal log-probability taken at the pre-clip sample",
    "PPO clip range 0.2, rollout horizon 2048 steps",
    "gamma=0.99 and lambda=0.95 by default; discount_variant=equal_095 runs 0.95/0.95",
    "conflicts use the union of TTC, DRAC and PET triggers; events are contiguous flagged runs",
    "vehicles in conflicts are counted per event",
    "leaving the carriageway laterally ends the episode and counts as a collision",
]


def get_working_directory() -> Path:
    """
    Get the directory that relative output paths resolve against.

    Honours the RISKDRIVE_WORKDIR environment variable, falling back to the
    current working directory.

    Returns:
        Path: Directory for run outputs.
    """
    override = os.getenv("RISKDRIVE_WORKDIR")
    return Path(override) if override else Path.cwd()


def load_env() -> None:
    """
    Load environment variables from the project's .env file.

    Existing environment variables are never overwritten, so calling this
    repeatedly is safe.
    """
    env_path = Path(__file__).parent.parent / ".env"
    load_dotenv(dotenv_path=env_path)


def setup_logging(
    level: str = "INFO", structured: bool = False, console: bool = True
) -> None:
    """
    Configure logging for the whole package.

    Args:
        level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL).
               Can also be set via LOG_LEVEL environment variable.
        structured: Whether to emit key=value structured records.
                   Can also be set via STRUCTURED_LOGGING=true.
        console: Whether to log to stderr. Can also be set via CONSOLE_LOGGING.

    Raises:
        ValueError: If the requested level is not a logging level name.

    Example:
        >>> setup_logging("DEBUG", structured=True)
    """
    log_level = os.getenv("LOG_LEVEL", level).upper()
    use_structured = os.getenv("STRUCTURED_LOGGING", str(structured)).lower() == "true"

    valid_levels = {"CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG", "NOTSET"}
    if log_level not in valid_levels:
        raise ValueError(
            f"Invalid log level '{log_level}'. Valid levels are: {', '.join(sorted(valid_levels))}."
        )

    if use_structured:
        log_format = (
            "timestamp=%(asctime)s level=%(levelname)s module=%(name)s "
            "function=%(funcName)s line=%(lineno)d message=%(message)s"
        )
    else:
        log_format = (
            "%(asctime)s [%(levelname)s] %(name)s.%(funcName)s:%(lineno)d - %(message)s"
        )
    formatter = logging.Formatter(log_format, datefmt="%Y-%m-%d %H:%M:%S")

    handlers: list[logging.Handler] = []
    if os.getenv("CONSOLE_LOGGING", str(console)).lower() == "true":
        console_handler = logging.StreamHandler()
        console_handler.setLevel(log_level)
        console_handler.setFormatter(formatter)
        handlers.append(console_handler)

    log_file = os.getenv("LOG_FILE")
    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(log_level)
        file_handler.setFormatter(formatter)
        handlers.append(file_handler)

    if not handlers:
        handlers.append(logging.NullHandler())

    root = logging.getLogger()
    root.setLevel(getattr(logging, log_level))
    logging.basicConfig(
        format=log_format,
        datefmt="%Y-%m-%d %H:%M:%S",
        handlers=handlers,
        force=True,
    )
    root.info(
        "Logging configured",
        extra={"log_level": log_level, "structured": use_structured},
    )


def arrival_rate_for_density(density_veh_per_km: float, speed: float) -> float:
    """
    Convert a traffic density into a Poisson arrival rate.

    Uses the fundamental relation flow = density * speed.

    Args:
        density_veh_per_km: Vehicles per kilometre of road (all lanes).
        speed: Mean traffic speed in m/s.

    Returns:
        float: Arrival rate in vehicles per second.

    Raises:
        ValueError: If either argument is negative.
    """
    if density_veh_per_km < 0 or speed < 0:
        raise ValueError("density and speed must be non-negative")
    return density_veh_per_km * speed / 1000.0


class StrictModel(PydanticBaseModel):
    """Frozen pydantic model that rejects unknown keys."""

    model_config = ConfigDict(extra="forbid", frozen=True)


class HighwayConfig(StrictModel):
    """Road geometry, traffic demand and vehicle population."""

    length: float = Field(default=2800.0, gt=0)
    lane_count: int = Field(default=3, ge=2)
    lane_width: float = Field(default=3.5, gt=0)
    speed_limit: float = Field(default=120.0 / 3.6, gt=0)
    heavy_fraction: float = Field(default=0.25, ge=0, le=1)
    arrival_rate: float = Field(default=1.2, ge=0)
    warmup: float = Field(default=115.0, ge=0)
    initial_speed: float = Field(default=20.0, ge=0)
    initial_speed_jitter: float = Field(default=0.0, ge=0)
    dt: float = Field(default=0.1, gt=0)
    light_mass: tuple[float, float] = (1000.0, 2000.0)
    heavy_mass: tuple[float, float] = (10000.0, 40000.0)
    light_size: tuple[float, float] = (4.5, 1.8)
    heavy_size: tuple[float, float] = (12.0, 2.5)
    spawn_safety_gap: float = Field(default=10.0, ge=0)
    lane_change_duration: float = Field(default=3.0, gt=0)
    lane_change_cooldown: float = Field(default=1.0, ge=0)
    emergency_decel: float = Field(default=9.0, gt=0)

    @model_validator(mode="after")
    def _check_ranges(self) -> "HighwayConfig":
        for name in ("light_mass", "heavy_mass", "light_size", "heavy_size"):
            low, high = getattr(self, name)
            if low <= 0 or high <= 0:
                raise ValueError(f"{name} entries must be > 0")
        if self.light_mass[0] > self.light_mass[1]:
            raise ValueError("light_mass must be (low, high)")
        if self.heavy_mass[0] > self.heavy_mass[1]:
            raise ValueError("heavy_mass must be (low, high)")
        return self

    @property
    def road_width(self) -> float:
        """Total carriageway width in metres."""
        return self.lane_count * self.lane_width

    def lane_center(self, lane: int) -> float:
        """Lateral centre of ``lane``; lane 0 is the rightmost lane."""
        return (lane + 0.5) * self.lane_width


class IDMConfig(StrictModel):
    """Intelligent Driver Model parameters for ambient vehicles."""

    a_max: float = Field(default=2.0, gt=0)
    b_comf: float = Field(default=2.0, gt=0)
    v0: Optional[float] = Field(default=None, gt=0)
    s0: float = Field(default=2.0, ge=0)
    t_headway: float = Field(default=1.2, ge=0)
    delta: float = Field(default=4.0, gt=0)

    def desired_speed(self, highway: HighwayConfig) -> float:
        """Desired speed, falling back to the road's speed limit."""
        return self.v0 if self.v0 is not None else highway.speed_limit


class MOBILConfig(StrictModel):
    """MOBIL lane-change parameters for ambient vehicles."""

    politeness: float = Field(default=0.3, ge=0)
    threshold: float = Field(default=0.2, ge=0)
    b_safe: float = Field(default=3.0, gt=0)


class RiskFieldParams(StrictModel):
    """Coefficients of the kinetic field and field-force model.

    The speed-term constants are fixed and exposed read-only.
    """

    SPEED_COEFF: ClassVar[float] = 1.566e-14
    SPEED_EXP: ClassVar[float] = 6.687
    SPEED_OFFSET: ClassVar[float] = 0.3345

    t_light: float = Field(default=1.0, gt=0)
    t_heavy: float = Field(default=0.6, gt=0)
    beta1: float = 0.05
    beta2: float = 0.05
    beta3: float = 0.05
    lambda_field: float = Field(default=1.0, gt=0)
    tau: float = Field(default=0.2, gt=0)
    pseudo_exp_coeff: Optional[float] = None
    force_speed_from_ov: bool = False

    @property
    def speed_coeff(self) -> float:
        return self.SPEED_COEFF

    @property
    def speed_exp(self) -> float:
        return self.SPEED_EXP

    @property
    def speed_offset(self) -> float:
        return self.SPEED_OFFSET

    @property
    def exp_coeff(self) -> float:
        """Coefficient of speed inside the pseudo-distance exponential."""
        return self.tau if self.pseudo_exp_coeff is None else self.pseudo_exp_coeff

    @classmethod
    def fixed_constants(cls) -> dict[str, float]:
        return {
            "speed_coeff": cls.SPEED_COEFF,
            "speed_exp": cls.SPEED_EXP,
            "speed_offset": cls.SPEED_OFFSET,
        }


class EnvConfig(StrictModel):
    """Decision-environment settings: action box, horizon, ego insertion."""

    a_long_max: float = Field(default=3.0, gt=0)
    a_lat_max: float = Field(default=2.0, gt=0)
    a_keep: float = Field(default=0.5, ge=0)
    horizon_steps: int = Field(default=600, gt=0)
    perception_range: float = Field(default=50.0, gt=0)
    adr_range: float = Field(default=50.0, gt=0)
    insertion_gap: float = Field(default=20.0, ge=0)
    insertion_x_min: float = Field(default=200.0, ge=0)
    insertion_x_max: float = Field(default=800.0, ge=0)
    insertion_retries: int = Field(default=50, gt=0)
    ego_mass: float = Field(default=1500.0, gt=0)

    @model_validator(mode="after")
    def _check_insertion(self) -> "EnvConfig":
        if self.insertion_x_min > self.insertion_x_max:
            raise ValueError("insertion_x_min must not exceed insertion_x_max")
        if self.a_keep > self.a_lat_max:
            raise ValueError("a_keep must not exceed a_lat_max")
        return self


class RewardConfig(StrictModel):
    """Reward weights, risk mode and normalization bounds."""

    w_risk: float = Field(default=1.0, ge=0)
    w_vertical: float = Field(default=2.0, ge=0)
    w_position: float = Field(default=0.5, ge=0)
    w_limit: float = Field(default=100.0, ge=0)
    w_collision: float = Field(default=100.0, ge=0)
    risk_mode: Literal["ADR", "TTC"] = "ADR"
    adr_min: float = 0.0
    adr_max: Optional[float] = None  # None: per-episode running maximum
    adr_floor: float = Field(default=1.0, gt=0)
    speed_min: float = 0.0
    speed_max: Optional[float] = None  # None: highway speed limit
    position_min: float = 0.0
    position_max: Optional[float] = None  # None: half a lane width

    @property
    def weights(self) -> tuple[float, float, float, float, float]:
        return (
            self.w_risk,
            self.w_vertical,
            self.w_position,
            self.w_limit,
            self.w_collision,
        )


class ThresholdConfig(StrictModel):
    """Surrogate-safety thresholds for conflict flagging."""

    ttc: float = Field(default=3.0, gt=0)
    drac: float = Field(default=3.0, gt=0)
    pet: float = Field(default=2.0, gt=0)
    pet_window: float = Field(default=5.0, gt=0)


class NetworkConfig(StrictModel):
    """Layer sizes of the actor and critic networks."""

    obs_dim: int = Field(default=43, gt=0)
    dense1: int = Field(default=64, gt=0)
    dense2: int = Field(default=128, gt=0)
    lstm: int = Field(default=64, gt=0)
    attention_dim: int = Field(default=64, gt=0)
    dense_out: int = Field(default=32, gt=0)
    n_branches: int = Field(default=3, gt=0)
    n_continuous: int = Field(default=2, gt=0)
    window: int = Field(default=8, gt=0)
    head_log_std: bool = False
    log_std_init: float = math.log(0.5)
    forget_bias: float = 1.0
    init_scale: float = Field(default=1.0, gt=0)


class TrainerConfig(StrictModel):
    """HPPO hyperparameters."""

    gamma: float = Field(default=0.99, gt=0, le=1)
    gae_lambda: float = Field(default=0.95, ge=0, le=1)
    clip_eps: float = Field(default=0.2, gt=0)
    value_coeff: float = Field(default=0.5, ge=0)
    entropy_coeff: float = Field(default=0.01, ge=0)
    minibatch: int = Field(default=4, gt=0)
    epochs: int = Field(default=4, gt=0)
    horizon: int = Field(default=2048, ge=0)
    iterations: int = Field(default=100, ge=0)
    attention_enabled: bool = True
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    num_envs: int = Field(default=1, gt=0)
    lr: float = Field(default=3e-4, ge=0)
    clip_norm: float = Field(default=0.1, gt=0)
    normalize_advantages: bool = True
    logprob_mode: Literal["pre_clip", "clipped_mass"] = "pre_clip"
    discount_variant: Literal["standard", "equal_095"] = "standard"
    checkpoint_every: int = Field(default=10, ge=0)

    @property
    def effective_gamma(self) -> float:
        return 0.95 if self.discount_variant == "equal_095" else self.gamma

    @property
    def effective_lambda(self) -> float:
        return 0.95 if self.discount_variant == "equal_095" else self.gae_lambda

    def updates_per_iteration(self) -> int:
        """Number of optimizer steps taken in one training iteration."""
        batch = self.horizon * self.num_envs
        return self.epochs * math.ceil(batch / self.minibatch) if batch else 0

    def total_updates(self) -> int:
        """Optimizer steps over the whole run; the lr reaches 0 here."""
        return self.iterations * self.updates_per_iteration()


class EvaluationConfig(StrictModel):
    """Evaluation protocol."""

    episodes: int = Field(default=20, gt=0)
    seeds: tuple[int, ...] = (100, 101, 102, 103, 104, 105)
    greedy: bool = True


class RunConfig(StrictModel):
    """Complete configuration of one run."""

    highway: HighwayConfig = HighwayConfig()
    idm: IDMConfig = IDMConfig()
    mobil: MOBILConfig = MOBILConfig()
    risk_field: RiskFieldParams = RiskFieldParams()
    env: EnvConfig = EnvConfig()
    reward: RewardConfig = RewardConfig()
    thresholds: ThresholdConfig = ThresholdConfig()
    network: NetworkConfig = NetworkConfig()
    trainer: TrainerConfig = TrainerConfig()
    evaluation: EvaluationConfig = EvaluationConfig()

    @classmethod
    def preset(cls, name: str) -> "RunConfig":
        """
        Build a named preset.

        Args:
            name: ``default`` or ``toy``. The toy scenario is a 500 m, 3-lane
                  road with sparse ambient traffic and a short horizon.

        Returns:
            RunConfig: The preset configuration.

        Raises:
            ConfigError: For an unknown preset name.
        """
        if name == "default":
            return cls()
        if name == "toy":
            highway = HighwayConfig(
                length=500.0,
                arrival_rate=arrival_rate_for_density(DENSITY_PRESETS["sparse"], 20.0),
                warmup=30.0,
            )
            return cls(
                highway=highway,
                env=EnvConfig(
                    horizon_steps=300, insertion_x_min=60.0, insertion_x_max=160.0
                ),
                trainer=TrainerConfig(minibatch=64, horizon=2048, iterations=50),
            )
        raise ConfigError(f"unknown preset '{name}'", key_path="preset")

    def with_density(self, density: str) -> "RunConfig":
        """Return a copy whose arrival rate matches a named density preset."""
        if density not in DENSITY_PRESETS:
            raise ConfigError(f"unknown density '{density}'", key_path="density")
        rate = arrival_rate_for_density(
            DENSITY_PRESETS[density], self.highway.initial_speed
        )
        return self.model_copy(
            update={"highway": self.highway.model_copy(update={"arrival_rate": rate})}
        )

    def resolved(self) -> dict[str, Any]:
        """Every configured value plus the read-only constants and ledger."""
        data = self.model_dump(mode="json")
        data["risk_field"]["fixed_constants"] = RiskFieldParams.fixed_constants()
        data["derived"] = {
            "idm_v0": self.idm.desired_speed(self.highway),
            "effective_gamma": self.trainer.effective_gamma,
            "effective_lambda": self.trainer.effective_lambda,
            "total_updates": self.trainer.total_updates(),
        }
        data["ledgered_deviations"] = list(LEDGERED_DEVIATIONS)
        return data


def _format_loc(loc: tuple[Any, ...]) -> str:
    return ".".join(str(part) for part in loc)


def build_run_config(
    data: Optional[dict[str, Any]], base: Optional[RunConfig] = None
) -> RunConfig:
    """
    Validate a nested mapping into a RunConfig.

    Sections absent from ``data`` keep the values of ``base`` (defaults when
    ``base`` is None). A ``risk_field.fixed_constants`` section is accepted
    only when it repeats the built-in constants.

    Args:
        data: Parsed configuration mapping.
        base: Configuration to overlay onto.

    Returns:
        RunConfig: Validated configuration.

    Raises:
        ConfigError: On unknown keys, invalid values or edited constants.
    """
    merged = (base or RunConfig()).model_dump()
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("configuration root must be a mapping")

    for section, values in data.items():
        if section in INFORMATIONAL_SECTIONS:
            continue
        if section not in merged:
            raise ConfigError("unknown configuration section", key_path=section)
        if not isinstance(values, dict):
            raise ConfigError("section must be a mapping", key_path=section)
        values = dict(values)
        if section == "risk_field" and "fixed_constants" in values:
            given = values.pop("fixed_constants") or {}
            expected = RiskFieldParams.fixed_constants()
            for key, value in given.items():
                if key not in expected:
                    raise ConfigError(
                        "unknown constant", key_path=f"risk_field.fixed_constants.{key}"
                    )
                if float(value) != expected[key]:
                    raise ConfigError(
                        f"fixed constant cannot be changed (expected {expected[key]})",
                        key_path=f"risk_field.fixed_constants.{key}",
                    )
        merged[section].update(values)

    try:
        return RunConfig.model_validate(merged)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise ConfigError(first["msg"], key_path=_format_loc(first["loc"])) from exc


def load_run_config(
    path: Optional[Path | str] = None, preset: str = "default"
) -> RunConfig:
    """
    Load a YAML configuration file on top of a preset.

    Args:
        path: YAML file; None returns the preset unchanged.
        preset: Name of the preset the file overlays.

    Returns:
        RunConfig: The resolved configuration.

    Raises:
        ConfigError: If the file cannot be parsed or contains invalid keys.
        FileNotFoundError: If ``path`` does not exist.
    """
    base = RunConfig.preset(preset)
    if path is None:
        return base
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    config = build_run_config(data, base=base)
    logger.info("Loaded run configuration", extra={"path": str(path), "preset": preset})
    return config


def dump_run_config(config: RunConfig) -> str:
    """Serialize the fully resolved configuration as YAML."""
    return yaml.safe_dump(config.resolved(), sort_keys=False)
