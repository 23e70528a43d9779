"""
Actor and critic networks built on the autograd tensor.

Both networks share one trunk shape: two ReLU dense layers applied to every
observation of the history window, an LSTM over the window, optional
temporal self-attention over the LSTM hidden states, and a 32-unit ReLU
layer feeding the heads. The actor emits three branch logits, two action
means and two log standard deviations; the critic emits one value.

The recurrent state carried across windows (``RecurrentState``) holds the
LSTM state of observations that already left the window. It is treated as
a constant during back-propagation.
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .autograd import (
    Parameter,
    Tensor,
    as_tensor,
    no_grad,
    softmax,
    stack,
)
from .config import NetworkConfig
from .errors import ShapeMismatch

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RDHPPO01"

TensorLike = Union[Tensor, np.ndarray]


class Dense:
    """Fully connected layer ``act(x @ W + b)`` over the last axis."""

    def __init__(
        self,
        n_in: int,
        n_out: int,
        rng: np.random.Generator,
        activation: str = "relu",
        scale: Optional[float] = None,
        name: str = "dense",
    ) -> None:
        if activation not in ("relu", "tanh", "linear"):
            raise ValueError(f"unknown activation '{activation}'")
        std = scale if scale is not None else math.sqrt(2.0 / n_in)
        self.weight = Parameter(rng.normal(0.0, std, size=(n_in, n_out)), name=f"{name}.weight")
        self.bias = Parameter(np.zeros(n_out), name=f"{name}.bias")
        self.activation = activation
        self.last_preactivation: Optional[np.ndarray] = None

    def __call__(self, x: TensorLike) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeMismatch(
                f"{self.weight.name}: expected {self.weight.shape[0]} inputs, got {x.shape[-1]}"
            )
        z = x @ self.weight + self.bias
        self.last_preactivation = z.data
        if self.activation == "relu":
            return z.relu()
        if self.activation == "tanh":
            return z.tanh()
        return z

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


@dataclass
class LSTMWeights:
    """Input, recurrent and bias weights with gates ordered (i, f, o, g)."""

    w_x: Parameter
    w_h: Parameter
    bias: Parameter

    @property
    def hidden(self) -> int:
        return self.w_h.shape[0]

    @classmethod
    def init(
        cls,
        n_in: int,
        hidden: int,
        rng: np.random.Generator,
        forget_bias: float = 1.0,
        name: str = "lstm",
    ) -> "LSTMWeights":
        bias = np.zeros(4 * hidden)
        bias[hidden : 2 * hidden] = forget_bias
        return cls(
            w_x=Parameter(
                rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, 4 * hidden)),
                name=f"{name}.w_x",
            ),
            w_h=Parameter(
                rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(hidden, 4 * hidden)),
                name=f"{name}.w_h",
            ),
            bias=Parameter(bias, name=f"{name}.bias"),
        )

    def parameters(self) -> list[Parameter]:
        return [self.w_x, self.w_h, self.bias]


def lstm_cell(
    x: TensorLike, h_prev: TensorLike, c_prev: TensorLike, weights: LSTMWeights
) -> tuple[Tensor, Tensor]:
    """
    One LSTM step.

    Args:
        x: Input of shape (batch, n_in).
        h_prev: Hidden state (batch, hidden).
        c_prev: Cell state (batch, hidden).
        weights: Cell weights.

    Returns:
        tuple: (h, c), each (batch, hidden).

    Raises:
        ShapeMismatch: If any shape disagrees with the weights.
    """
    x, h_prev, c_prev = as_tensor(x), as_tensor(h_prev), as_tensor(c_prev)
    hidden = weights.hidden
    if x.ndim != 2 or x.shape[1] != weights.w_x.shape[0]:
        raise ShapeMismatch(f"lstm input must be (batch, {weights.w_x.shape[0]}), got {x.shape}")
    expected = (x.shape[0], hidden)
    if h_prev.shape != expected or c_prev.shape != expected:
        raise ShapeMismatch(
            f"lstm state must be {expected}, got {h_prev.shape} and {c_prev.shape}"
        )
    z = x @ weights.w_x + h_prev @ weights.w_h + weights.bias
    i = z[:, 0:hidden].sigmoid()
    f = z[:, hidden : 2 * hidden].sigmoid()
    o = z[:, 2 * hidden : 3 * hidden].sigmoid()
    g = z[:, 3 * hidden : 4 * hidden].tanh()
    c = f * c_prev + i * g
    h = o * c.tanh()
    return h, c


@dataclass
class AttentionWeights:
    """Query, key and value projections of the temporal self-attention."""

    w_q: Parameter
    w_k: Parameter
    w_v: Parameter

    @classmethod
    def init(
        cls, n_in: int, dim: int, rng: np.random.Generator, name: str = "attention"
    ) -> "AttentionWeights":
        std = 1.0 / math.sqrt(n_in)
        return cls(
            w_q=Parameter(rng.normal(0.0, std, size=(n_in, dim)), name=f"{name}.w_q"),
            w_k=Parameter(rng.normal(0.0, std, size=(n_in, dim)), name=f"{name}.w_k"),
            w_v=Parameter(rng.normal(0.0, std, size=(n_in, dim)), name=f"{name}.w_v"),
        )

    def parameters(self) -> list[Parameter]:
        return [self.w_q, self.w_k, self.w_v]


def attention_forward(
    hidden_states: TensorLike,
    weights: AttentionWeights,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Scaled dot-product self-attention over a sequence of hidden states.

    ``softmax(Q K^T / sqrt(d_k)) V`` with Q, K, V linear maps of the
    states. Masked (padding) positions are excluded as keys.

    Args:
        hidden_states: (T, n_in) or (batch, T, n_in).
        weights: Projections; d_k is the key width.
        mask: Optional 0/1 validity of each position, shape (T,) or (batch, T).

    Returns:
        Tensor: Attended sequence, (T, d_v) or (batch, T, d_v).

    Raises:
        ShapeMismatch: On an empty sequence or inconsistent widths.
    """
    states = as_tensor(hidden_states)
    if states.ndim not in (2, 3) or states.shape[-2] == 0:
        raise ShapeMismatch(f"attention needs a non-empty (.., T, n) input, got {states.shape}")
    d_k = weights.w_k.shape[1]
    if d_k <= 0 or states.shape[-1] != weights.w_q.shape[0]:
        raise ShapeMismatch(
            f"attention expects width {weights.w_q.shape[0]} and d_k > 0, got {states.shape}"
        )
    q = states @ weights.w_q
    k = states @ weights.w_k
    v = states @ weights.w_v
    scores = (q @ k.T) / math.sqrt(d_k)
    if mask is not None:
        valid = np.asarray(mask, dtype=np.float64)
        # Padding keys get a large negative score; rows keep at least one valid key.
        scores = scores + np.expand_dims((valid - 1.0) * 1e9, -2)
    return softmax(scores) @ v


@dataclass
class RecurrentState:
    """Carried LSTM states of the actor and critic trunks, (batch, hidden) each."""

    actor_h: np.ndarray
    actor_c: np.ndarray
    critic_h: np.ndarray
    critic_c: np.ndarray

    @classmethod
    def zeros(cls, batch: int, hidden: int) -> "RecurrentState":
        return cls(*(np.zeros((batch, hidden)) for _ in range(4)))

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return self.actor_h, self.actor_c, self.critic_h, self.critic_c

    @classmethod
    def concatenate(cls, states: list["RecurrentState"]) -> "RecurrentState":
        columns = zip(*(s.arrays() for s in states), strict=True)
        return cls(*(np.concatenate(column, axis=0) for column in columns))

    def take(self, index: np.ndarray) -> "RecurrentState":
        return RecurrentState(*(a[index] for a in self.arrays()))


class RecurrentTrunk:
    """Shared trunk: dense, dense, LSTM, optional attention, dense."""

    def __init__(
        self,
        cfg: NetworkConfig,
        attention: bool,
        rng: np.random.Generator,
        name: str,
    ) -> None:
        scale = cfg.init_scale
        self.cfg = cfg
        self.attention_enabled = attention
        self.dense1 = Dense(
            cfg.obs_dim, cfg.dense1, rng, scale=scale * math.sqrt(2.0 / cfg.obs_dim),
            name=f"{name}.dense1",
        )
        self.dense2 = Dense(
            cfg.dense1, cfg.dense2, rng, scale=scale * math.sqrt(2.0 / cfg.dense1),
            name=f"{name}.dense2",
        )
        self.lstm = LSTMWeights.init(
            cfg.dense2, cfg.lstm, rng, forget_bias=cfg.forget_bias, name=f"{name}.lstm"
        )
        self.attention: Optional[AttentionWeights] = None
        pooled = cfg.lstm
        if attention:
            self.attention = AttentionWeights.init(
                cfg.lstm, cfg.attention_dim, rng, name=f"{name}.attention"
            )
            pooled = cfg.attention_dim
        self.dense_out = Dense(
            pooled, cfg.dense_out, rng, scale=scale * math.sqrt(2.0 / pooled),
            name=f"{name}.dense_out",
        )

    def parameters(self) -> list[Parameter]:
        params = self.dense1.parameters() + self.dense2.parameters() + self.lstm.parameters()
        if self.attention is not None:
            params += self.attention.parameters()
        return params + self.dense_out.parameters()

    def dense_layers(self) -> list[Dense]:
        return [self.dense1, self.dense2, self.dense_out]

    def encode(self, observations: TensorLike) -> Tensor:
        return self.dense2(self.dense1(observations))

    def __call__(
        self,
        windows: np.ndarray,
        masks: np.ndarray,
        h0: np.ndarray,
        c0: np.ndarray,
    ) -> Tensor:
        """
        Context vectors of a batch of observation windows.

        Args:
            windows: (batch, W, obs_dim), left-padded with zeros.
            masks: (batch, W) validity; padded steps leave the LSTM state as is.
            h0: Carried hidden state (batch, lstm).
            c0: Carried cell state (batch, lstm).
        """
        if windows.ndim != 3 or windows.shape[2] != self.cfg.obs_dim or windows.shape[1] == 0:
            raise ShapeMismatch(
                f"windows must be (batch, W>=1, {self.cfg.obs_dim}), got {windows.shape}"
            )
        if masks.shape != windows.shape[:2]:
            raise ShapeMismatch(f"mask shape {masks.shape} != window shape {windows.shape[:2]}")
        features = self.encode(windows)
        h: Tensor = as_tensor(h0)
        c: Tensor = as_tensor(c0)
        hidden_states = []
        for t in range(windows.shape[1]):
            step_mask = masks[:, t : t + 1]
            h_new, c_new = lstm_cell(features[:, t, :], h, c, self.lstm)
            h = h_new * step_mask + h * (1.0 - step_mask)
            c = c_new * step_mask + c * (1.0 - step_mask)
            hidden_states.append(h)
        if self.attention is None:
            return self.dense_out(h)
        attended = attention_forward(stack(hidden_states, axis=1), self.attention, masks)
        weights = masks / masks.sum(axis=1, keepdims=True)
        pooled = (attended * weights[:, :, None]).sum(axis=1)
        return self.dense_out(pooled)

    def advance(self, observations: np.ndarray, h: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Feed one observation per row through the LSTM without recording."""
        with no_grad():
            h_new, c_new = lstm_cell(self.encode(observations), h, c, self.lstm)
        return h_new.data, c_new.data


class Actor:
    """Trunk plus branch-logit, mean and log-std heads."""

    def __init__(self, cfg: NetworkConfig, attention: bool, rng: np.random.Generator) -> None:
        self.cfg = cfg
        self.trunk = RecurrentTrunk(cfg, attention, rng, name="actor")
        self.branch_head = Dense(
            cfg.dense_out, cfg.n_branches, rng, activation="linear", scale=0.01,
            name="actor.branch_head",
        )
        self.mean_head = Dense(
            cfg.dense_out, cfg.n_continuous, rng, activation="linear", scale=0.01,
            name="actor.mean_head",
        )
        self.log_std_head: Optional[Dense] = None
        self.log_std: Optional[Parameter] = None
        if cfg.head_log_std:
            self.log_std_head = Dense(
                cfg.dense_out, cfg.n_continuous, rng, activation="linear", scale=0.01,
                name="actor.log_std_head",
            )
            self.log_std_head.bias.data[:] = cfg.log_std_init
        else:
            self.log_std = Parameter(
                np.full(cfg.n_continuous, cfg.log_std_init), name="actor.log_std"
            )

    def parameters(self) -> list[Parameter]:
        params = (
            self.trunk.parameters() + self.branch_head.parameters() + self.mean_head.parameters()
        )
        if self.log_std_head is not None:
            return params + self.log_std_head.parameters()
        assert self.log_std is not None
        return params + [self.log_std]

    def __call__(
        self, windows: np.ndarray, masks: np.ndarray, h0: np.ndarray, c0: np.ndarray
    ) -> tuple[Tensor, Tensor, Tensor]:
        context = self.trunk(windows, masks, h0, c0)
        logits = self.branch_head(context)
        means = self.mean_head(context)
        if self.log_std_head is not None:
            log_stds = self.log_std_head(context)
        else:
            assert self.log_std is not None
            log_stds = self.log_std + np.zeros((windows.shape[0], self.cfg.n_continuous))
        return logits, means, log_stds


class Critic:
    """Trunk plus a scalar value head."""

    def __init__(self, cfg: NetworkConfig, attention: bool, rng: np.random.Generator) -> None:
        self.trunk = RecurrentTrunk(cfg, attention, rng, name="critic")
        self.value_head = Dense(
            cfg.dense_out, 1, rng, activation="linear", scale=1.0 / math.sqrt(cfg.dense_out),
            name="critic.value_head",
        )

    def parameters(self) -> list[Parameter]:
        return self.trunk.parameters() + self.value_head.parameters()

    def __call__(
        self, windows: np.ndarray, masks: np.ndarray, h0: np.ndarray, c0: np.ndarray
    ) -> Tensor:
        value = self.value_head(self.trunk(windows, masks, h0, c0))
        return value.reshape(windows.shape[0])


@dataclass
class PolicyOutput:
    """Batched network outputs: logits (n,3), means (n,2), log_stds (n,2), value (n,)."""

    logits: Tensor
    means: Tensor
    log_stds: Tensor
    value: Tensor


class PolicyModel:
    """
    Separate actor and critic networks with a common interface.

    Example:
        >>> model = PolicyModel(NetworkConfig(), attention_enabled=True, seed=0)
        >>> logits, means, log_stds, value = model.forward_actor(np.zeros((4, 43)))
        >>> logits.shape, means.shape, log_stds.shape, value.shape
        ((3,), (2,), (2,), (1,))
    """

    def __init__(self, cfg: NetworkConfig, attention_enabled: bool = True, seed: int = 0) -> None:
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.attention_enabled = attention_enabled
        self.actor = Actor(cfg, attention_enabled, rng)
        self.critic = Critic(cfg, attention_enabled, rng)

    def parameters(self) -> list[Parameter]:
        """All parameters in declaration order (actor first)."""
        return self.actor.parameters() + self.critic.parameters()

    def dense_layers(self) -> list[Dense]:
        return self.actor.trunk.dense_layers() + self.critic.trunk.dense_layers()

    def forward(
        self, windows: np.ndarray, masks: np.ndarray, state: RecurrentState
    ) -> PolicyOutput:
        logits, means, log_stds = self.actor(windows, masks, state.actor_h, state.actor_c)
        value = self.critic(windows, masks, state.critic_h, state.critic_c)
        return PolicyOutput(logits=logits, means=means, log_stds=log_stds, value=value)

    def advance(self, state: RecurrentState, observations: np.ndarray) -> RecurrentState:
        """Carry the recurrent state through observations leaving the window."""
        actor_h, actor_c = self.actor.trunk.advance(observations, state.actor_h, state.actor_c)
        critic_h, critic_c = self.critic.trunk.advance(
            observations, state.critic_h, state.critic_c
        )
        return RecurrentState(actor_h, actor_c, critic_h, critic_c)

    def forward_actor(
        self, obs_history: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """
        Outputs for a single observation history starting from a zero state.

        Args:
            obs_history: (W, obs_dim) normalized observations, oldest first.

        Returns:
            tuple: (logits[3], means[2], log_stds[2], value[1]).

        Raises:
            ShapeMismatch: For an empty window or a wrong observation width.
        """
        history = np.asarray(obs_history, dtype=np.float64)
        if history.ndim != 2 or history.shape[0] == 0 or history.shape[1] != self.cfg.obs_dim:
            raise ShapeMismatch(
                f"history must be (W>=1, {self.cfg.obs_dim}), got {history.shape}"
            )
        with no_grad():
            out = self.forward(
                history[None, :, :],
                np.ones((1, history.shape[0])),
                RecurrentState.zeros(1, self.cfg.lstm),
            )
        return (
            out.logits.data[0],
            out.means.data[0],
            out.log_stds.data[0],
            out.value.data[:1],
        )

    def snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_arrays(self, arrays: list[np.ndarray]) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ShapeMismatch(f"expected {len(params)} arrays, got {len(arrays)}")
        for param, array in zip(params, arrays, strict=True):
            if param.shape != array.shape:
                raise ShapeMismatch(f"{param.name}: shape {array.shape} != {param.shape}")
            param.data = np.array(array, dtype=np.float64)

    def spec_hash(self) -> bytes:
        """sha256 over the network configuration and the parameter layout."""
        layout = {
            "network": self.cfg.model_dump(mode="json"),
            "attention_enabled": self.attention_enabled,
            "parameters": [[p.name, list(p.shape)] for p in self.parameters()],
        }
        return hashlib.sha256(json.dumps(layout, sort_keys=True).encode("utf-8")).digest()


def save_checkpoint(model: PolicyModel, path: Union[Path, str]) -> Path:
    """
    Write parameters as magic, layout hash, then little-endian float64 arrays.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(model.spec_hash())
        for param in model.parameters():
            handle.write(param.data.astype("<f8").tobytes())
    logger.info("Checkpoint written", extra={"path": str(path)})
    return path


def load_checkpoint(model: PolicyModel, path: Union[Path, str]) -> PolicyModel:
    """
    Load parameters written by ``save_checkpoint`` into ``model``.

    Raises:
        ShapeMismatch: If the file's magic, layout hash or size does not
            match the model.
    """
    raw = Path(path).read_bytes()
    header = len(CHECKPOINT_MAGIC)
    if raw[:header] != CHECKPOINT_MAGIC:
        raise ShapeMismatch(f"{path}: not a checkpoint (bad magic bytes)")
    digest = model.spec_hash()
    if raw[header : header + len(digest)] != digest:
        raise ShapeMismatch(f"{path}: checkpoint was written for a different network layout")
    payload = np.frombuffer(raw[header + len(digest) :], dtype="<f8")
    expected = sum(p.data.size for p in model.parameters())
    if payload.size != expected:
        raise ShapeMismatch(f"{path}: expected {expected} floats, found {payload.size}")
    arrays = []
    offset = 0
    for param in model.parameters():
        arrays.append(payload[offset : offset + param.data.size].reshape(param.shape).astype(np.float64))
        offset += param.data.size
    model.load_arrays(arrays)
    logger.info("Checkpoint loaded", extra={"path": str(path)})
    return model
