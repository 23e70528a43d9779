"""
Policy evaluation: episode runner, multi-seed summaries and variant studies.

Three policies share one small interface (``reset`` and ``act``): a trained
model, a uniformly random policy and an idle policy that keeps its lane
without accelerating. Every evaluated episode is turned into an
EpisodeReport by the same analysis used for replayed logs.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol

import numpy as np
import pandas as pd
from scipy import stats

from .autograd import no_grad
from .config import EnvConfig, RunConfig
from .envmdp import HighwayEnv
from .hppo import RecurrentContext, sample_hybrid_action, train
from .models import Branch, ConflictEvent, EpisodeLog, EpisodeReport, HybridAction
from .networks import PolicyModel
from .safetymetrics import analyze_episode

logger = logging.getLogger(__name__)


class Policy(Protocol):
    name: str

    def reset(self) -> None: ...

    def act(self, observation: np.ndarray, rng: np.random.Generator) -> HybridAction: ...


class IdlePolicy:
    """Keep the lane at constant speed."""

    name = "idle"

    def reset(self) -> None:
        pass

    def act(self, observation: np.ndarray, rng: np.random.Generator) -> HybridAction:
        return HybridAction(branch=Branch.FOLLOWING, a_vertical=0.0, a_lateral=0.0)


class RandomPolicy:
    """Uniform branch and uniform accelerations inside the action box."""

    name = "random"

    def __init__(self, bounds: EnvConfig) -> None:
        self.bounds = bounds

    def reset(self) -> None:
        pass

    def act(self, observation: np.ndarray, rng: np.random.Generator) -> HybridAction:
        branch = Branch(int(rng.integers(len(Branch))))
        return HybridAction(
            branch=branch,
            a_vertical=float(rng.uniform(-self.bounds.a_long_max, self.bounds.a_long_max)),
            a_lateral=float(rng.uniform(-self.bounds.a_lat_max, self.bounds.a_lat_max)),
        )


class ModelPolicy:
    """
    A trained actor with its own observation window and carried state.

    Greedy mode takes the most likely branch and the mean accelerations.
    """

    name = "model"

    def __init__(self, model: PolicyModel, cfg: RunConfig, greedy: bool = True) -> None:
        self.model = model
        self.cfg = cfg
        self.greedy = greedy
        self.context = self._new_context()

    def _new_context(self) -> RecurrentContext:
        network = self.cfg.network
        return RecurrentContext(network.window, network.obs_dim, network.lstm)

    def reset(self) -> None:
        self.context = self._new_context()

    def act(self, observation: np.ndarray, rng: np.random.Generator) -> HybridAction:
        self.context.push(observation, self.model)
        window, mask = self.context.padded()
        with no_grad():
            out = self.model.forward(window[None], mask[None], self.context.state)
        logits, means = out.logits.data[0], out.means.data[0]
        if self.greedy:
            return HybridAction(
                branch=Branch(int(np.argmax(logits))),
                a_vertical=float(means[0]),
                a_lateral=float(means[1]),
            )
        action, _, _ = sample_hybrid_action(
            logits, means, out.log_stds.data[0], rng, self.cfg.env, self.cfg.trainer.logprob_mode
        )
        return action


@dataclass
class EpisodeOutcome:
    """One evaluated episode."""

    seed: int
    episode_return: float
    steps: int
    reason: Optional[str]
    log: EpisodeLog
    report: EpisodeReport
    events: list[ConflictEvent]


def run_episode(
    env: HighwayEnv, policy: Policy, seed: int, max_steps: Optional[int] = None
) -> EpisodeOutcome:
    """
    Run ``policy`` for one episode and analyse the resulting log.

    Args:
        env: Environment; reset with ``seed``.
        policy: Policy to drive the ego.
        seed: Episode seed; also seeds the policy's randomness.
        max_steps: Optional cap below the environment horizon.
    """
    cfg = env.cfg
    rng = np.random.default_rng([seed, 3])
    policy.reset()
    observation = env.observation_array(env.env_reset(seed))
    reason: Optional[str] = None
    steps = 0
    done = False
    while not done:
        obs, _, done, info = env.env_step(policy.act(observation, rng))
        observation = env.observation_array(obs)
        steps += 1
        reason = info["reason"]
        if max_steps is not None and steps >= max_steps and not done:
            assert env.log is not None
            env.log.complete = True
            reason = "max_steps"
            break
    assert env.log is not None
    report, events = analyze_episode(
        env.log,
        cfg.risk_field,
        cfg.thresholds,
        adr_range=cfg.env.adr_range,
        perception_range=cfg.env.perception_range,
    )
    logger.info(
        "Episode evaluated",
        extra={
            "policy": policy.name,
            "seed": seed,
            "steps": steps,
            "reason": reason,
            "collisions": report.collisions,
            "conflicts": report.conflicts,
        },
    )
    return EpisodeOutcome(
        seed=seed,
        episode_return=env.episode_return,
        steps=steps,
        reason=reason,
        log=env.log,
        report=report,
        events=events,
    )


def episode_seeds(seed: int, episodes: int) -> list[int]:
    return [seed + i for i in range(episodes)]


def evaluate_policy(
    cfg: RunConfig, policy: Policy, seeds: Sequence[int]
) -> list[EpisodeOutcome]:
    """One episode per seed in a fresh environment."""
    env = HighwayEnv(cfg)
    return [run_episode(env, policy, seed) for seed in seeds]


def confidence_interval(values: Sequence[float], level: float = 0.95) -> tuple[float, float, float]:
    """
    Mean and Student-t confidence bounds.

    Returns:
        tuple: (mean, low, high); the bounds equal the mean for fewer than
        two values or zero spread.
    """
    data = np.asarray(values, dtype=np.float64)
    if data.size == 0:
        return math.nan, math.nan, math.nan
    mean = float(np.mean(data))
    if data.size < 2:
        return mean, mean, mean
    sem = float(stats.sem(data))
    if sem == 0.0:
        return mean, mean, mean
    low, high = stats.t.interval(level, data.size - 1, loc=mean, scale=sem)
    return mean, float(low), float(high)


def summarize_reports(reports: Sequence[EpisodeReport]) -> pd.DataFrame:
    """Mean and 95% interval of every report field."""
    frame = pd.DataFrame([r.to_dict() for r in reports])
    rows = []
    for column in frame.columns:
        mean, low, high = confidence_interval(frame[column].astype(float).tolist())
        rows.append({"metric": column, "mean": mean, "ci_low": low, "ci_high": high})
    return pd.DataFrame(rows, columns=["metric", "mean", "ci_low", "ci_high"])


def collision_rate(outcomes: Sequence[EpisodeOutcome]) -> float:
    if not outcomes:
        return 0.0
    return sum(1 for o in outcomes if o.report.collisions > 0) / len(outcomes)


@dataclass
class VariantResult:
    """Training and evaluation figures of one variant over its seeds."""

    name: str
    final_returns: list[float] = field(default_factory=list)
    first_returns: list[float] = field(default_factory=list)
    pcec: list[float] = field(default_factory=list)


@dataclass
class DirectionalCheck:
    """A soft comparison between two variants; never fails a run."""

    description: str
    better: str
    worse: str
    difference: tuple[float, float, float]
    holds: bool


def _variant_configs(base: RunConfig) -> dict[str, RunConfig]:
    def with_trainer(cfg: RunConfig, **changes: object) -> RunConfig:
        return cfg.model_copy(update={"trainer": cfg.trainer.model_copy(update=changes)})

    def with_risk_mode(cfg: RunConfig, mode: str) -> RunConfig:
        return cfg.model_copy(update={"reward": cfg.reward.model_copy(update={"risk_mode": mode})})

    adr = with_risk_mode(base, "ADR")
    return {
        "attention_adr": with_trainer(adr, attention_enabled=True),
        "no_attention_adr": with_trainer(adr, attention_enabled=False),
        "attention_ttc": with_trainer(with_risk_mode(base, "TTC"), attention_enabled=True),
    }


def variant_study(
    base: RunConfig,
    seeds: Sequence[int],
    eval_seeds: Sequence[int],
    output_dir: Optional[Path] = None,
) -> tuple[dict[str, VariantResult], list[DirectionalCheck]]:
    """
    Train the attention/no-attention and ADR/TTC-reward variants and compare.

    Each variant is trained once per seed and evaluated greedily on the same
    evaluation seeds. Two directional checks are reported with 95%
    intervals of the paired differences: attention should reach a final
    mean return at least as high as without, and the ADR reward should give
    a PCEC no higher than the TTC reward.
    """
    results: dict[str, VariantResult] = {}
    for name, cfg in _variant_configs(base).items():
        result = VariantResult(name=name)
        for seed in seeds:
            run_dir = output_dir / name / f"seed_{seed}" if output_dir is not None else None
            history, model = train(cfg, seed=seed, output_dir=run_dir)
            if history:
                result.first_returns.append(history[0].mean_return)
                result.final_returns.append(history[-1].mean_return)
            outcomes = evaluate_policy(cfg, ModelPolicy(model, cfg, greedy=True), eval_seeds)
            result.pcec.append(float(np.mean([o.report.pcec for o in outcomes])))
        results[name] = result

    checks = [
        _directional(
            "attention final return >= no attention",
            results["attention_adr"].final_returns,
            results["no_attention_adr"].final_returns,
            "attention_adr",
            "no_attention_adr",
        ),
        _directional(
            "TTC-reward PCEC >= ADR-reward PCEC",
            results["attention_ttc"].pcec,
            results["attention_adr"].pcec,
            "attention_ttc",
            "attention_adr",
        ),
    ]
    for check in checks:
        log = logger.info if check.holds else logger.warning
        log(
            "Directional check",
            extra={
                "check": check.description,
                "holds": check.holds,
                "mean_difference": check.difference[0],
                "ci": check.difference[1:],
            },
        )
    return results, checks


def _directional(
    description: str,
    larger: Sequence[float],
    smaller: Sequence[float],
    larger_name: str,
    smaller_name: str,
) -> DirectionalCheck:
    paired = [a - b for a, b in zip(larger, smaller, strict=False)]
    difference = confidence_interval(paired)
    return DirectionalCheck(
        description=description,
        better=larger_name,
        worse=smaller_name,
        difference=difference,
        holds=bool(paired) and difference[0] >= 0.0,
    )


def learning_gain(first: Sequence[float], final: Sequence[float]) -> tuple[float, float]:
    """
    Mean per-seed gain of the final over the first iteration and its standard error.

    Returns:
        tuple: (mean gain, standard error); the error is nan for fewer than
        two seeds.
    """
    gains = np.asarray(final, dtype=np.float64) - np.asarray(first, dtype=np.float64)
    if gains.size == 0:
        return math.nan, math.nan
    error = float(stats.sem(gains)) if gains.size > 1 else math.nan
    return float(np.mean(gains)), error


@dataclass
class LearningCheck:
    """Learning-curve improvement and safety of a trained policy against random."""

    first_returns: list[float]
    final_returns: list[float]
    trained_collision_rate: float
    random_collision_rate: float
    min_standard_errors: float = 3.0

    @property
    def improved(self) -> bool:
        """Final returns beat the first iteration by the required standard errors."""
        gain, error = learning_gain(self.first_returns, self.final_returns)
        if math.isnan(gain) or math.isnan(error):
            return False
        return gain > 0.0 and gain >= self.min_standard_errors * error

    @property
    def safer_than_random(self) -> bool:
        return self.trained_collision_rate == 0.0 and self.random_collision_rate > 0.0


def learning_check(
    cfg: RunConfig,
    seeds: Sequence[int],
    eval_seeds: Sequence[int],
    output_dir: Optional[Path] = None,
) -> LearningCheck:
    """
    Train once per seed and compare the learning curves' ends.

    The model trained on the first seed is evaluated greedily on
    ``eval_seeds`` next to a random policy on the same seeds.
    """
    first: list[float] = []
    final: list[float] = []
    models: list[PolicyModel] = []
    for seed in seeds:
        run_dir = output_dir / f"seed_{seed}" if output_dir is not None else None
        history, model = train(cfg, seed=seed, output_dir=run_dir)
        if history:
            first.append(history[0].mean_return)
            final.append(history[-1].mean_return)
        models.append(model)
    trained = (
        collision_rate(evaluate_policy(cfg, ModelPolicy(models[0], cfg, greedy=True), eval_seeds))
        if models
        else math.nan
    )
    check = LearningCheck(
        first_returns=first,
        final_returns=final,
        trained_collision_rate=trained,
        random_collision_rate=collision_rate(
            evaluate_policy(cfg, RandomPolicy(cfg.env), eval_seeds)
        ),
    )
    gain, error = learning_gain(first, final)
    logger.info(
        "Learning check",
        extra={
            "seeds": list(seeds),
            "gain": gain,
            "standard_error": error,
            "trained_collision_rate": check.trained_collision_rate,
            "random_collision_rate": check.random_collision_rate,
        },
    )
    return check
