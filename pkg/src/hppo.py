"""
Hierarchical proximal policy optimization for the hybrid driving action.

The actor has a discrete head (lane-change branch) and a continuous head
(longitudinal and lateral acceleration); each is trained with its own
clipped surrogate objective. The critic is a separate network trained with
a clipped value loss, and both heads receive an entropy bonus. The
minimized loss is ``-J_d - J_c + c_v * L_value - c_e * (H_d + H_c)``.

The module follows these principles:
- Rollouts, GAE and the losses are plain functions over numpy arrays or
  autograd tensors, so each can be checked against a brute-force oracle.
- The recurrent context of every environment (observation window plus the
  carried LSTM state) persists across collection calls and resets only at
  episode boundaries.
- Training is deterministic for a given seed.
"""

import json
import logging
import math
from collections import deque
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
from scipy import special

from .autograd import (
    Tensor,
    as_tensor,
    backward,
    clip,
    log_ndtr,
    log_softmax,
    maximum,
    minimum,
    no_grad,
    where,
)
from .config import EnvConfig, RunConfig, get_working_directory
from .envmdp import HighwayEnv, branch_bounds
from .errors import LengthMismatch, NonFiniteLoss
from .models import Branch, HybridAction
from .networks import PolicyModel, PolicyOutput, RecurrentState, save_checkpoint
from .optim import Adam
from .trajio import write_learning_curve_csv

logger = logging.getLogger(__name__)

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

ArrayOrTensor = Union[np.ndarray, Tensor]


def gae_advantages(
    rewards: Sequence[float],
    values: Sequence[float],
    dones: Sequence[bool],
    gamma: float,
    lam: float,
    bootstrap: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Generalized advantage estimates and returns of one trajectory.

    ``delta_t = r_t + gamma * V(s_{t+1}) * (1 - d_t) - V(s_t)`` and
    ``A_t = delta_t + gamma * lam * (1 - d_t) * A_{t+1}``; the accumulation
    restarts after every done flag. ``bootstrap`` is V of the state after
    the last step (ignored when that step is done).

    Returns:
        tuple: (advantages, returns) with returns = advantages + values.

    Raises:
        LengthMismatch: If the three sequences differ in length.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=bool)
    if not r.shape == v.shape == d.shape:
        raise LengthMismatch(
            f"rewards {r.shape}, values {v.shape} and dones {d.shape} must match"
        )
    advantages = np.zeros_like(r)
    running = 0.0
    for t in range(len(r) - 1, -1, -1):
        next_value = bootstrap if t == len(r) - 1 else v[t + 1]
        nonterminal = 0.0 if d[t] else 1.0
        delta = r[t] + gamma * next_value * nonterminal - v[t]
        running = delta + gamma * lam * nonterminal * running
        advantages[t] = running
    return advantages, advantages + v


def _check_lengths(*arrays: ArrayOrTensor) -> None:
    shapes = {tuple(a.shape) for a in arrays}
    if len(shapes) != 1:
        raise LengthMismatch(f"inputs must share one shape, got {sorted(shapes)}")


def clipped_policy_objective(
    logp_new: ArrayOrTensor, logp_old: np.ndarray, advantages: np.ndarray, eps: float
) -> Tensor:
    """
    Mean of ``min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)``.

    Raises:
        LengthMismatch: If the inputs differ in shape.
    """
    logp_new = as_tensor(logp_new)
    logp_old = np.asarray(logp_old, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    _check_lengths(logp_new, logp_old, advantages)
    ratio = (logp_new - logp_old).exp()
    surrogate = minimum(ratio * advantages, clip(ratio, 1.0 - eps, 1.0 + eps) * advantages)
    return surrogate.mean()


def clipped_value_loss(
    v_new: ArrayOrTensor, v_old: np.ndarray, returns: np.ndarray, eps: float
) -> Tensor:
    """
    Mean of ``max((R - V_new)^2, (R - V_clip)^2)`` with
    ``V_clip = V_old + clip(V_new - V_old, -eps, eps)``.

    Raises:
        LengthMismatch: If the inputs differ in shape.
    """
    v_new = as_tensor(v_new)
    v_old = np.asarray(v_old, dtype=np.float64)
    returns = np.asarray(returns, dtype=np.float64)
    _check_lengths(v_new, v_old, returns)
    v_clip = clip(v_new - v_old, -eps, eps) + v_old
    unclipped = (v_new - returns) ** 2
    clipped = (v_clip - returns) ** 2
    return maximum(unclipped, clipped).mean()


def total_loss(
    j_d: Any,
    j_c: Any,
    l_value: Any,
    h_d: Any,
    h_c: Any,
    value_coeff: float = 0.5,
    entropy_coeff: float = 0.01,
) -> Any:
    """
    Minimized training loss ``-J_d - J_c + c_v * L_value - c_e * (H_d + H_c)``.

    Works on floats and tensors alike.

    Example:
        >>> total_loss(1.0, 2.0, 4.0, 0.5, 0.5)
        -1.01
    """
    return -j_d - j_c + value_coeff * l_value - entropy_coeff * (h_d + h_c)


def categorical_log_prob(logits: ArrayOrTensor, branches: np.ndarray) -> Tensor:
    log_probs = log_softmax(logits)
    rows = np.arange(log_probs.shape[0])
    return log_probs[rows, np.asarray(branches, dtype=np.int64)]


def categorical_entropy(logits: ArrayOrTensor) -> Tensor:
    log_probs = log_softmax(logits)
    return -(log_probs.exp() * log_probs).sum(axis=-1)


def normal_log_density(
    actions: np.ndarray, means: ArrayOrTensor, log_stds: ArrayOrTensor
) -> Tensor:
    """Per-dimension Normal log-density, shape (n, k)."""
    means, log_stds = as_tensor(means), as_tensor(log_stds)
    z = (means - actions) / log_stds.exp()
    return -0.5 * z * z - log_stds - LOG_SQRT_2PI


def continuous_log_prob(
    actions: np.ndarray,
    means: ArrayOrTensor,
    log_stds: ArrayOrTensor,
    mode: str = "pre_clip",
    low: Optional[np.ndarray] = None,
    high: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Log-probability of pre-clip samples under the clipped Normal.

    In ``pre_clip`` mode the Normal density at the raw sample is used. In
    ``clipped_mass`` mode a sample beyond a bound scores the Normal mass
    beyond that bound.

    Returns:
        Tensor: Summed over action dimensions, shape (n,).
    """
    density = normal_log_density(actions, means, log_stds)
    if mode == "pre_clip":
        return density.sum(axis=-1)
    if mode != "clipped_mass" or low is None or high is None:
        raise ValueError(f"unknown log-prob mode '{mode}' or missing bounds")
    means, log_stds = as_tensor(means), as_tensor(log_stds)
    stds = log_stds.exp()
    upper_tail = log_ndtr((means - high) / stds)
    lower_tail = log_ndtr((-means + low) / stds)
    above = actions >= high
    below = actions <= low
    return where(above, upper_tail, where(below, lower_tail, density)).sum(axis=-1)


def normal_entropy(log_stds: ArrayOrTensor) -> Tensor:
    return (as_tensor(log_stds) + (0.5 + LOG_SQRT_2PI)).sum(axis=-1)


def _log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits)
    return shifted - np.log(np.sum(np.exp(shifted)))


def _bounds_arrays(
    branches: np.ndarray, env_cfg: EnvConfig
) -> tuple[np.ndarray, np.ndarray]:
    low = np.zeros((len(branches), 2))
    high = np.zeros((len(branches), 2))
    for i, branch in enumerate(branches):
        low[i], high[i] = branch_bounds(Branch(int(branch)), env_cfg)
    return low, high


def sample_hybrid_action(
    logits: np.ndarray,
    means: np.ndarray,
    log_stds: np.ndarray,
    rng: np.random.Generator,
    bounds: Optional[EnvConfig] = None,
    mode: str = "pre_clip",
) -> tuple[HybridAction, float, float]:
    """
    Draw a branch and a continuous pair from the policy heads.

    Args:
        logits: Three branch logits.
        means: Two action means.
        log_stds: Two log standard deviations.
        rng: Source of randomness; one uniform then two normals are drawn.
        bounds: Action limits, required for ``clipped_mass``.
        mode: Log-probability mode of the continuous head.

    Returns:
        tuple: (raw pre-clip HybridAction, log p(branch), log p(continuous)).
    """
    logits = np.asarray(logits, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    log_stds = np.asarray(log_stds, dtype=np.float64)
    log_probs = _log_softmax_np(logits)
    cumulative = np.cumsum(np.exp(log_probs))
    branch = min(int(np.searchsorted(cumulative, rng.random(), side="right")), len(logits) - 1)
    sample = means + np.exp(log_stds) * rng.standard_normal(means.shape)

    z = (sample - means) / np.exp(log_stds)
    density = -0.5 * z * z - log_stds - LOG_SQRT_2PI
    if mode == "clipped_mass":
        if bounds is None:
            raise ValueError("clipped_mass log-probabilities need action bounds")
        low, high = (np.asarray(b) for b in branch_bounds(Branch(branch), bounds))
        stds = np.exp(log_stds)
        density = np.where(
            sample >= high,
            special.log_ndtr((means - high) / stds),
            np.where(sample <= low, special.log_ndtr((low - means) / stds), density),
        )
    raw = HybridAction(
        branch=Branch(branch), a_vertical=float(sample[0]), a_lateral=float(sample[1])
    )
    return raw, float(log_probs[branch]), float(np.sum(density))


@dataclass
class RolloutStep:
    """Everything one environment step contributes to a rollout."""

    window: np.ndarray
    mask: np.ndarray
    state: RecurrentState
    branch: int
    action: np.ndarray
    reward: float
    done: bool
    logp_d: float
    logp_c: float
    value: float
    env_index: int


@dataclass
class Minibatch:
    """Stacked arrays for one gradient step."""

    windows: np.ndarray
    masks: np.ndarray
    state: RecurrentState
    branches: np.ndarray
    actions: np.ndarray
    logp_d: np.ndarray
    logp_c: np.ndarray
    values: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self) -> int:
        return len(self.branches)

    def arrays(self) -> dict[str, np.ndarray]:
        actor_h, actor_c, critic_h, critic_c = self.state.arrays()
        return {
            "windows": self.windows,
            "masks": self.masks,
            "actor_h": actor_h,
            "actor_c": actor_c,
            "critic_h": critic_h,
            "critic_c": critic_c,
            "branches": self.branches,
            "actions": self.actions,
            "logp_d": self.logp_d,
            "logp_c": self.logp_c,
            "values": self.values,
            "advantages": self.advantages,
            "returns": self.returns,
        }


@dataclass
class RolloutBuffer:
    """
    Steps of one collection, ordered time-major across environments.

    Advantages and returns exist only after ``estimate``.
    """

    num_envs: int = 1
    steps: list[RolloutStep] = field(default_factory=list)
    bootstrap: dict[int, float] = field(default_factory=dict)
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.steps)

    def add(self, step: RolloutStep) -> None:
        self.steps.append(step)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(step, name) for step in self.steps], dtype=np.float64)

    def estimate(self, gamma: float, lam: float) -> None:
        """Fill advantages and returns, one GAE pass per environment."""
        n = len(self.steps)
        self.advantages = np.zeros(n)
        self.returns = np.zeros(n)
        for env_index in range(self.num_envs):
            idx = [i for i, step in enumerate(self.steps) if step.env_index == env_index]
            if not idx:
                continue
            adv, ret = gae_advantages(
                [self.steps[i].reward for i in idx],
                [self.steps[i].value for i in idx],
                [self.steps[i].done for i in idx],
                gamma,
                lam,
                bootstrap=self.bootstrap.get(env_index, 0.0),
            )
            self.advantages[idx] = adv
            self.returns[idx] = ret

    def batch(self, index: Sequence[int]) -> Minibatch:
        if self.advantages is None or self.returns is None:
            raise RuntimeError("call estimate() before drawing minibatches")
        chosen = [self.steps[i] for i in index]
        return Minibatch(
            windows=np.stack([s.window for s in chosen]),
            masks=np.stack([s.mask for s in chosen]),
            state=RecurrentState.concatenate([s.state for s in chosen]),
            branches=np.array([s.branch for s in chosen], dtype=np.int64),
            actions=np.stack([s.action for s in chosen]),
            logp_d=np.array([s.logp_d for s in chosen]),
            logp_c=np.array([s.logp_c for s in chosen]),
            values=np.array([s.value for s in chosen]),
            advantages=self.advantages[list(index)],
            returns=self.returns[list(index)],
        )

    def minibatches(self, size: int, rng: np.random.Generator) -> Iterator[Minibatch]:
        order = rng.permutation(len(self.steps))
        for start in range(0, len(order), size):
            yield self.batch(order[start : start + size].tolist())


@dataclass
class EpisodeSummary:
    """Outcome of one finished training episode."""

    episode_return: float
    mean_adr: float
    length: int
    reason: Optional[str]


class RecurrentContext:
    """Observation window and carried LSTM state of one running episode."""

    def __init__(self, window: int, obs_dim: int, hidden: int) -> None:
        self.window = window
        self.obs_dim = obs_dim
        self.history: deque[np.ndarray] = deque()
        self.state = RecurrentState.zeros(1, hidden)
        self.episode_return = 0.0
        self.adr_values: list[float] = []
        self.length = 0

    def push(self, observation: np.ndarray, model: PolicyModel) -> None:
        """Append an observation; the oldest one moves into the carried state."""
        if len(self.history) == self.window:
            oldest = self.history.popleft()
            self.state = model.advance(self.state, oldest[None, :])
        self.history.append(observation)

    def padded(self) -> tuple[np.ndarray, np.ndarray]:
        """Window left-padded with zeros, and its validity mask."""
        windows = np.zeros((self.window, self.obs_dim))
        mask = np.zeros(self.window)
        offset = self.window - len(self.history)
        for i, observation in enumerate(self.history):
            windows[offset + i] = observation
        mask[offset:] = 1.0
        return windows, mask


class RolloutCollector:
    """
    Runs the current policy in one or more environments.

    Episode seeds come from a generator seeded with the collector seed, so
    a fixed seed and fixed parameters give identical buffers.
    """

    def __init__(
        self, envs: Sequence[HighwayEnv], model: PolicyModel, cfg: RunConfig, seed: int = 0
    ) -> None:
        if not envs:
            raise ValueError("at least one environment is required")
        self.envs = list(envs)
        self.model = model
        self.cfg = cfg
        self.action_rng = np.random.default_rng([seed, 0])
        self.seed_rng = np.random.default_rng([seed, 1])
        self.contexts: list[Optional[RecurrentContext]] = [None] * len(self.envs)
        self.completed: list[EpisodeSummary] = []

    def _start_episode(self, index: int) -> RecurrentContext:
        env = self.envs[index]
        observation = env.env_reset(seed=int(self.seed_rng.integers(2**31 - 1)))
        context = RecurrentContext(self.cfg.network.window, self.cfg.network.obs_dim, self.cfg.network.lstm)
        context.push(env.observation_array(observation), self.model)
        self.contexts[index] = context
        return context

    def _context(self, index: int) -> RecurrentContext:
        context = self.contexts[index]
        return context if context is not None else self._start_episode(index)

    def _policy(self, contexts: list[RecurrentContext]) -> PolicyOutput:
        padded = [c.padded() for c in contexts]
        with no_grad():
            return self.model.forward(
                np.stack([w for w, _ in padded]),
                np.stack([m for _, m in padded]),
                RecurrentState.concatenate([c.state for c in contexts]),
            )

    def collect(self, horizon: int) -> RolloutBuffer:
        """
        Run ``horizon`` steps in every environment.

        Returns:
            RolloutBuffer: ``horizon * num_envs`` steps with bootstrap values.
        """
        buffer = RolloutBuffer(num_envs=len(self.envs))
        mode = self.cfg.trainer.logprob_mode
        for _ in range(horizon):
            contexts = [self._context(i) for i in range(len(self.envs))]
            out = self._policy(contexts)
            for i, (env, context) in enumerate(zip(self.envs, contexts, strict=True)):
                window, mask = context.padded()
                raw, logp_d, logp_c = sample_hybrid_action(
                    out.logits.data[i],
                    out.means.data[i],
                    out.log_stds.data[i],
                    self.action_rng,
                    bounds=self.cfg.env,
                    mode=mode,
                )
                observation, reward, done, info = env.env_step(raw)
                buffer.add(
                    RolloutStep(
                        window=window,
                        mask=mask,
                        state=context.state,
                        branch=int(raw.branch),
                        action=np.array([raw.a_vertical, raw.a_lateral]),
                        reward=reward.total,
                        done=done,
                        logp_d=logp_d,
                        logp_c=logp_c,
                        value=float(out.value.data[i]),
                        env_index=i,
                    )
                )
                context.episode_return += reward.total
                context.adr_values.append(float(info["adr"]))
                context.length += 1
                if done:
                    self.completed.append(
                        EpisodeSummary(
                            episode_return=context.episode_return,
                            mean_adr=float(np.mean(context.adr_values)),
                            length=context.length,
                            reason=info["reason"],
                        )
                    )
                    self.contexts[i] = None
                else:
                    context.push(env.observation_array(observation), self.model)

        running = [(i, c) for i, c in enumerate(self.contexts) if c is not None]
        if running and horizon > 0:
            out = self._policy([c for _, c in running])
            for row, (i, _) in enumerate(running):
                buffer.bootstrap[i] = float(out.value.data[row])
        return buffer

    def running_returns(self) -> list[float]:
        return [c.episode_return for c in self.contexts if c is not None]


def collect_rollout(
    envs: Sequence[HighwayEnv], model: PolicyModel, horizon: int, cfg: RunConfig, seed: int = 0
) -> RolloutBuffer:
    """One-shot collection with a fresh collector."""
    return RolloutCollector(envs, model, cfg, seed).collect(horizon)


@dataclass
class ActionEvaluation:
    """Differentiable quantities of a minibatch under the current policy."""

    logp_d: Tensor
    logp_c: Tensor
    entropy_d: Tensor
    entropy_c: Tensor
    values: Tensor


def evaluate_actions(model: PolicyModel, batch: Minibatch, cfg: RunConfig) -> ActionEvaluation:
    out = model.forward(batch.windows, batch.masks, batch.state)
    low = high = None
    if cfg.trainer.logprob_mode == "clipped_mass":
        low, high = _bounds_arrays(batch.branches, cfg.env)
    return ActionEvaluation(
        logp_d=categorical_log_prob(out.logits, batch.branches),
        logp_c=continuous_log_prob(
            batch.actions, out.means, out.log_stds, cfg.trainer.logprob_mode, low, high
        ),
        entropy_d=categorical_entropy(out.logits),
        entropy_c=normal_entropy(out.log_stds),
        values=out.value,
    )


@dataclass
class LossBreakdown:
    total: float
    policy_d: float
    policy_c: float
    value: float
    entropy_d: float
    entropy_c: float


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance; batches of one are only centred."""
    centred = advantages - advantages.mean()
    if len(advantages) < 2:
        return centred
    return centred / (advantages.std() + 1e-8)


def compute_losses(
    model: PolicyModel, batch: Minibatch, cfg: RunConfig
) -> tuple[Tensor, LossBreakdown]:
    """Total HPPO loss of a minibatch and its components."""
    trainer = cfg.trainer
    advantages = (
        normalize_advantages(batch.advantages) if trainer.normalize_advantages else batch.advantages
    )
    evaluation = evaluate_actions(model, batch, cfg)
    j_d = clipped_policy_objective(evaluation.logp_d, batch.logp_d, advantages, trainer.clip_eps)
    j_c = clipped_policy_objective(evaluation.logp_c, batch.logp_c, advantages, trainer.clip_eps)
    l_value = clipped_value_loss(evaluation.values, batch.values, batch.returns, trainer.clip_eps)
    h_d = evaluation.entropy_d.mean()
    h_c = evaluation.entropy_c.mean()
    loss = total_loss(j_d, j_c, l_value, h_d, h_c, trainer.value_coeff, trainer.entropy_coeff)
    return loss, LossBreakdown(
        total=loss.item(),
        policy_d=j_d.item(),
        policy_c=j_c.item(),
        value=l_value.item(),
        entropy_d=h_d.item(),
        entropy_c=h_c.item(),
    )


@dataclass
class IterationLog:
    """One learning-curve row."""

    iteration: int
    mean_return: float
    mean_adr: float
    loss_total: float
    loss_value: float
    entropy_d: float
    entropy_c: float
    lr: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "iteration": self.iteration,
            "mean_return": self.mean_return,
            "mean_adr": self.mean_adr,
            "loss_total": self.loss_total,
            "loss_value": self.loss_value,
            "entropy_d": self.entropy_d,
            "entropy_c": self.entropy_c,
            "lr": self.lr,
        }


EnvFactory = Callable[[RunConfig], HighwayEnv]


class Trainer:
    """
    Runs the HPPO loop: collect, estimate, then epochs of minibatch updates.

    Example:
        >>> trainer = Trainer(RunConfig.preset("toy"), seed=0, output_dir=Path("runs/toy"))
        >>> history = trainer.train()
    """

    def __init__(
        self,
        cfg: RunConfig,
        seed: int = 0,
        output_dir: Optional[Path] = None,
        env_factory: EnvFactory = HighwayEnv,
    ) -> None:
        self.cfg = cfg
        self.seed = seed
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.model = PolicyModel(cfg.network, cfg.trainer.attention_enabled, seed=seed)
        self.optimizer = Adam(
            self.model.parameters(),
            base_lr=cfg.trainer.lr,
            total_steps=cfg.trainer.total_updates(),
            clip_norm=cfg.trainer.clip_norm,
        )
        self.envs = [env_factory(cfg) for _ in range(cfg.trainer.num_envs)]
        self.collector = RolloutCollector(self.envs, self.model, cfg, seed=seed)
        self.shuffle_rng = np.random.default_rng([seed, 2])
        self.history: list[IterationLog] = []
        self.checkpoints: list[Path] = []

    def _dump_minibatch(self, batch: Minibatch, iteration: int) -> Path:
        directory = self.output_dir or get_working_directory()
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"nonfinite_minibatch_iter{iteration:04d}.npz"
        np.savez(path, **batch.arrays())
        return path

    def update(self, buffer: RolloutBuffer, iteration: int) -> tuple[LossBreakdown, float]:
        """
        Epochs of minibatch updates on an estimated buffer.

        Returns:
            tuple: (mean loss components over all minibatches, last lr).

        Raises:
            NonFiniteLoss: On a non-finite loss or gradient; the minibatch is
                saved as ``.npz`` next to the run outputs.
        """
        trainer = self.cfg.trainer
        params = self.model.parameters()
        totals: list[LossBreakdown] = []
        lr = self.optimizer.state.lr
        for _ in range(trainer.epochs):
            for batch in buffer.minibatches(trainer.minibatch, self.shuffle_rng):
                loss, parts = compute_losses(self.model, batch, self.cfg)
                grads = backward(loss, params) if math.isfinite(parts.total) else []
                if not math.isfinite(parts.total) or not all(np.all(np.isfinite(g)) for g in grads):
                    path = self._dump_minibatch(batch, iteration)
                    logger.error(
                        "Non-finite loss",
                        extra={"iteration": iteration, "loss": parts.total, "dump": str(path)},
                    )
                    raise NonFiniteLoss(
                        f"non-finite loss or gradient at iteration {iteration}", dump_path=str(path)
                    )
                lr = self.optimizer.step(grads)
                totals.append(parts)
        if not totals:
            return LossBreakdown(0.0, 0.0, 0.0, 0.0, 0.0, 0.0), lr
        mean = {
            name: float(np.mean([getattr(t, name) for t in totals]))
            for name in LossBreakdown.__dataclass_fields__
        }
        return LossBreakdown(**mean), lr

    def run_iteration(self, iteration: int) -> IterationLog:
        trainer = self.cfg.trainer
        finished_before = len(self.collector.completed)
        buffer = self.collector.collect(trainer.horizon)
        buffer.estimate(trainer.effective_gamma, trainer.effective_lambda)
        losses, lr = self.update(buffer, iteration)

        finished = self.collector.completed[finished_before:]
        if finished:
            mean_return = float(np.mean([e.episode_return for e in finished]))
            mean_adr = float(np.mean([e.mean_adr for e in finished]))
        else:
            running = self.collector.running_returns()
            mean_return = float(np.mean(running)) if running else 0.0
            mean_adr = 0.0
        row = IterationLog(
            iteration=iteration,
            mean_return=mean_return,
            mean_adr=mean_adr,
            loss_total=losses.total,
            loss_value=losses.value,
            entropy_d=losses.entropy_d,
            entropy_c=losses.entropy_c,
            lr=lr,
        )
        logger.info(
            "Training iteration finished",
            extra={
                "iteration": iteration,
                "episodes": len(finished),
                "mean_return": mean_return,
                "loss_total": losses.total,
            },
        )
        return row

    def _write_checkpoint(self, name: str) -> None:
        if self.output_dir is None:
            return
        self.checkpoints.append(save_checkpoint(self.model, self.output_dir / name))

    def _write_outputs(self) -> None:
        if self.output_dir is None:
            return
        write_learning_curve_csv(self.history, self.output_dir / "learning_curve.csv")
        manifest = {
            "seed": self.seed,
            "iterations_completed": len(self.history),
            "config": self.cfg.resolved(),
            "checkpoints": [p.name for p in self.checkpoints],
        }
        (self.output_dir / "run_manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
        )

    def train(self) -> list[IterationLog]:
        """
        Run every configured iteration.

        Returns:
            list[IterationLog]: One row per iteration (empty for zero iterations).
        """
        trainer = self.cfg.trainer
        if self.output_dir is not None:
            self.output_dir.mkdir(parents=True, exist_ok=True)
        logger.info(
            "Training started",
            extra={
                "seed": self.seed,
                "iterations": trainer.iterations,
                "horizon": trainer.horizon,
                "attention": trainer.attention_enabled,
            },
        )
        for iteration in range(1, trainer.iterations + 1):
            self.history.append(self.run_iteration(iteration))
            if trainer.checkpoint_every and iteration % trainer.checkpoint_every == 0:
                self._write_checkpoint(f"checkpoint_{iteration:04d}.bin")
            self._write_outputs()
        self._write_checkpoint("final.bin")
        self._write_outputs()
        return self.history


def train(
    cfg: RunConfig,
    seed: int = 0,
    output_dir: Optional[Path] = None,
    env_factory: EnvFactory = HighwayEnv,
) -> tuple[list[IterationLog], PolicyModel]:
    """Train a policy; returns the learning curve and the trained model."""
    trainer = Trainer(cfg, seed=seed, output_dir=output_dir, env_factory=env_factory)
    history = trainer.train()
    return history, trainer.model
