"""
Finite-difference verification of the autograd gradients.

Each trial builds a small random instance of a component, computes the
analytic gradient of a scalar loss, and compares it per parameter with a
central difference along a random unit direction. Trials that land within
a small margin of a non-differentiable point (ReLU at zero, the clip
boundaries of the surrogate and value losses) are redrawn.
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .autograd import Parameter, Tensor, backward, no_grad
from .config import NetworkConfig, RunConfig
from .hppo import (
    Minibatch,
    clipped_policy_objective,
    clipped_value_loss,
    compute_losses,
    evaluate_actions,
)
from .networks import (
    AttentionWeights,
    Dense,
    LSTMWeights,
    PolicyModel,
    RecurrentState,
    attention_forward,
    lstm_cell,
)

logger = logging.getLogger(__name__)

LAYER_TOLERANCE = 1e-4
FULL_LOSS_TOLERANCE = 1e-3
KINK_MARGIN = 1e-3
MAX_REDRAWS = 50

COMPONENTS = (
    "dense",
    "lstm",
    "attention",
    "network",
    "policy_objective",
    "value_loss",
    "total_loss",
)

TINY_NETWORK = NetworkConfig(
    obs_dim=5,
    dense1=4,
    dense2=4,
    lstm=3,
    attention_dim=3,
    dense_out=3,
    window=3,
)


@dataclass
class ComponentResult:
    """Worst relative error of one component over all its trials."""

    component: str
    trials: int
    max_relative_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance


@dataclass
class GradCheckReport:
    results: dict[str, ComponentResult] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results.values())

    def to_dict(self) -> dict[str, Any]:
        return {
            name: {
                "trials": r.trials,
                "max_relative_error": r.max_relative_error,
                "tolerance": r.tolerance,
                "passed": r.passed,
            }
            for name, r in self.results.items()
        }


# A trial returns the loss closure, the parameters to check, and whether it
# sits safely away from every kink.
Trial = tuple[Callable[[], Tensor], list[Tensor], bool]


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def directional_error(
    loss_fn: Callable[[], Tensor],
    params: list[Tensor],
    rng: np.random.Generator,
    eps: float = 1e-5,
) -> float:
    """Worst per-parameter relative error of the directional derivative."""
    grads = backward(loss_fn(), params)
    worst = 0.0
    for param, grad in zip(params, grads, strict=True):
        direction = rng.standard_normal(param.shape)
        direction /= max(float(np.linalg.norm(direction)), 1e-12)
        base = param.data.copy()
        with no_grad():
            param.data = base + eps * direction
            f_plus = loss_fn().item()
            param.data = base - eps * direction
            f_minus = loss_fn().item()
        param.data = base
        numeric = (f_plus - f_minus) / (2.0 * eps)
        worst = max(worst, relative_error(float(np.sum(grad * direction)), numeric))
    return worst


def _relu_clear(layers: list[Dense]) -> bool:
    return all(
        layer.activation != "relu"
        or layer.last_preactivation is None
        or np.min(np.abs(layer.last_preactivation)) > KINK_MARGIN
        for layer in layers
    )


def _ratio_clear(ratio: np.ndarray, eps: float) -> bool:
    return bool(np.all(np.abs(np.abs(ratio - 1.0) - eps) > KINK_MARGIN))


def _value_clear(
    v_new: np.ndarray, v_old: np.ndarray, returns: np.ndarray, eps: float
) -> bool:
    delta = v_new - v_old
    v_clip = v_old + np.clip(delta, -eps, eps)
    inside = np.abs(delta) < eps
    tie = np.abs((v_new - returns) ** 2 - (v_clip - returns) ** 2) <= KINK_MARGIN
    return bool(np.all(np.abs(np.abs(delta) - eps) > KINK_MARGIN) and np.all(inside | ~tie))


def _dense_trial(rng: np.random.Generator) -> Trial:
    layer = Dense(4, 5, rng, activation="relu", name="check.dense")
    x = Parameter(rng.standard_normal((3, 4)), name="x")
    weights = rng.standard_normal((3, 5))

    def loss() -> Tensor:
        return (layer(x) * weights).sum()

    loss()
    return loss, [layer.weight, layer.bias, x], _relu_clear([layer])


def _lstm_trial(rng: np.random.Generator) -> Trial:
    cell = LSTMWeights.init(3, 4, rng, forget_bias=float(rng.normal()), name="check.lstm")
    x = Parameter(rng.standard_normal((2, 3)), name="x")
    h0 = Parameter(rng.standard_normal((2, 4)) * 0.5, name="h0")
    c0 = Parameter(rng.standard_normal((2, 4)) * 0.5, name="c0")
    wh, wc = rng.standard_normal((2, 4)), rng.standard_normal((2, 4))

    def loss() -> Tensor:
        h, c = lstm_cell(x, h0, c0, cell)
        return (h * wh).sum() + (c * wc).sum()

    return loss, [*cell.parameters(), x, h0, c0], True


def _attention_trial(rng: np.random.Generator) -> Trial:
    weights = AttentionWeights.init(5, 3, rng, name="check.attention")
    states = Parameter(rng.standard_normal((2, 4, 5)), name="states")
    mask = np.ones((2, 4))
    mask[1, 0] = 0.0
    out_weights = rng.standard_normal((2, 4, 3))

    def loss() -> Tensor:
        return (attention_forward(states, weights, mask) * out_weights).sum()

    return loss, [*weights.parameters(), states], True


def _tiny_batch(model: PolicyModel, rng: np.random.Generator, n: int = 4) -> Minibatch:
    cfg = model.cfg
    windows = rng.standard_normal((n, cfg.window, cfg.obs_dim))
    masks = np.ones((n, cfg.window))
    masks[0, : cfg.window - 1] = 0.0
    state = RecurrentState(*(0.3 * rng.standard_normal((n, cfg.lstm)) for _ in range(4)))
    return Minibatch(
        windows=windows,
        masks=masks,
        state=state,
        branches=rng.integers(0, cfg.n_branches, size=n),
        actions=rng.standard_normal((n, cfg.n_continuous)),
        logp_d=np.zeros(n),
        logp_c=np.zeros(n),
        values=np.zeros(n),
        advantages=rng.standard_normal(n),
        returns=rng.standard_normal(n),
    )


def _network_trial(rng: np.random.Generator) -> Trial:
    model = PolicyModel(TINY_NETWORK, attention_enabled=True, seed=int(rng.integers(2**31)))
    batch = _tiny_batch(model, rng)
    w = [rng.standard_normal((4, 3)), rng.standard_normal((4, 2)), rng.standard_normal((4, 2))]
    wv = rng.standard_normal(4)

    def loss() -> Tensor:
        out = model.forward(batch.windows, batch.masks, batch.state)
        return (
            (out.logits * w[0]).sum()
            + (out.means * w[1]).sum()
            + (out.log_stds * w[2]).sum()
            + (out.value * wv).sum()
        )

    loss()
    return loss, model.parameters(), _relu_clear(model.dense_layers())


def _policy_objective_trial(rng: np.random.Generator) -> Trial:
    eps = 0.2
    logp_old = rng.normal(-1.0, 0.5, size=6)
    logp_new = Parameter(logp_old + rng.normal(0.0, 0.3, size=6), name="logp_new")
    advantages = rng.standard_normal(6)

    def loss() -> Tensor:
        return clipped_policy_objective(logp_new, logp_old, advantages, eps)

    return loss, [logp_new], _ratio_clear(np.exp(logp_new.data - logp_old), eps)


def _value_loss_trial(rng: np.random.Generator) -> Trial:
    eps = 0.2
    v_old = rng.standard_normal(6)
    v_new = Parameter(v_old + rng.normal(0.0, 0.3, size=6), name="v_new")
    returns = rng.standard_normal(6)
    clear = _value_clear(v_new.data, v_old, returns, eps)

    def loss() -> Tensor:
        return clipped_value_loss(v_new, v_old, returns, eps)

    return loss, [v_new], clear


def _total_loss_trial(rng: np.random.Generator) -> Trial:
    cfg = RunConfig(network=TINY_NETWORK)
    eps = cfg.trainer.clip_eps
    model = PolicyModel(TINY_NETWORK, attention_enabled=True, seed=int(rng.integers(2**31)))
    batch = _tiny_batch(model, rng)
    with no_grad():
        current = evaluate_actions(model, batch, cfg)
    batch.logp_d = current.logp_d.data + rng.normal(0.0, 0.3, size=len(batch))
    batch.logp_c = current.logp_c.data + rng.normal(0.0, 0.3, size=len(batch))
    batch.values = current.values.data + rng.normal(0.0, 0.3, size=len(batch))

    def loss() -> Tensor:
        total, _ = compute_losses(model, batch, cfg)
        return total

    loss()
    clear = (
        _relu_clear(model.dense_layers())
        and _ratio_clear(np.exp(current.logp_d.data - batch.logp_d), eps)
        and _ratio_clear(np.exp(current.logp_c.data - batch.logp_c), eps)
        and _value_clear(current.values.data, batch.values, batch.returns, eps)
    )
    return loss, model.parameters(), clear


_TRIALS: dict[str, tuple[Callable[[np.random.Generator], Trial], float]] = {
    "dense": (_dense_trial, LAYER_TOLERANCE),
    "lstm": (_lstm_trial, LAYER_TOLERANCE),
    "attention": (_attention_trial, LAYER_TOLERANCE),
    "network": (_network_trial, LAYER_TOLERANCE),
    "policy_objective": (_policy_objective_trial, LAYER_TOLERANCE),
    "value_loss": (_value_loss_trial, LAYER_TOLERANCE),
    "total_loss": (_total_loss_trial, FULL_LOSS_TOLERANCE),
}


def gradient_check(
    module_id: str = "all", trials: int = 100, seed: int = 0, eps: float = 1e-5
) -> GradCheckReport:
    """
    Compare analytic and central-difference gradients.

    Args:
        module_id: One of ``COMPONENTS`` or ``all``.
        trials: Random instances per component.
        seed: Seed of the instance generator.
        eps: Finite-difference step.

    Returns:
        GradCheckReport: Max relative error per component.

    Example:
        >>> gradient_check("dense", trials=100).results["dense"].passed
        True
    """
    if module_id != "all" and module_id not in _TRIALS:
        raise ValueError(f"unknown component '{module_id}', expected one of {COMPONENTS}")
    names = list(COMPONENTS) if module_id == "all" else [module_id]
    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for name in names:
        make_trial, tolerance = _TRIALS[name]
        worst = 0.0
        scored = 0
        for _ in range(trials):
            for _ in range(MAX_REDRAWS):
                loss_fn, params, clear = make_trial(rng)
                if clear:
                    break
            else:
                logger.warning(
                    "Skipping gradient trial, every draw sits near a kink",
                    extra={"component": name, "redraws": MAX_REDRAWS},
                )
                continue
            worst = max(worst, directional_error(loss_fn, params, rng, eps))
            scored += 1
        report.results[name] = ComponentResult(name, scored, worst, tolerance)
        logger.info(
            "Gradient check finished",
            extra={"component": name, "trials": scored, "max_relative_error": worst},
        )
    return report
