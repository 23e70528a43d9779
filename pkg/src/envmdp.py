"""
Sequential decision environment around the highway simulation.

``HighwayEnv`` follows the gymnasium API (``reset``/``step`` returning
arrays) and also exposes the typed ``env_reset``/``env_step`` pair that
returns Observation and RewardBreakdown objects. Each episode warms up the
ambient traffic, inserts the ego at a random feasible slot and then runs
until a collision, the road end or the step horizon.

Observation, action constraint and reward are also available as
standalone functions so they can be tested against staged worlds.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Optional, Union

import gymnasium as gym
import numpy as np
from gymnasium import spaces

from .config import EnvConfig, RunConfig
from .errors import (
    EpisodeFinished,
    MissingEgo,
    NegativeGap,
    NoFeasibleInsertion,
    SingularPosition,
)
from .models import (
    OBS_DIM,
    Branch,
    ControllerTag,
    EpisodeLog,
    HybridAction,
    Observation,
    ObservationScales,
    RewardBreakdown,
    VehicleClass,
    VehicleState,
)
from .riskfield import field_force
from .safetymetrics import ttc
from .simworld import (
    LaneIndex,
    WorldState,
    bumper_gap,
    insert_vehicle,
    lane_of,
    make_vehicle_state,
    new_world,
    occupied_lanes,
    world_records,
    world_step,
)

logger = logging.getLogger(__name__)

RawAction = Union[HybridAction, tuple[Any, float, float]]


@dataclass(frozen=True)
class ActionOutcome:
    """What happened to the ego during the step being rewarded."""

    collision: bool = False
    adr_bound: Optional[float] = None


def _ego(world: WorldState, ego_id: int) -> VehicleState:
    vehicle = world.vehicles.get(ego_id)
    if vehicle is None:
        raise MissingEgo(f"ego vehicle {ego_id} is not in the world")
    return vehicle.state


def build_observation(
    world: WorldState, ego_id: int, cfg: RunConfig
) -> Observation:
    """
    Observation of the ego's six neighbor slots and its own motion.

    Slots are left-lead, left-follow, same-lead, same-follow, right-lead,
    right-follow. A slot whose nearest vehicle is absent or further than the
    perception range is zero-filled with its presence flag at 0.

    Raises:
        MissingEgo: If ``ego_id`` is not in the world.
    """
    ego = _ego(world, ego_id)
    highway = cfg.highway
    lane = world.vehicles[ego_id].lane
    index = LaneIndex(world.vehicles, highway)
    obs = Observation()
    x = ego.position_x
    for slot_lane, base in ((lane + 1, 0), (lane, 2), (lane - 1, 4)):
        if not 0 <= slot_lane < highway.lane_count:
            continue
        for offset, vid in (
            (0, index.leader(slot_lane, x, ego_id)),
            (1, index.follower(slot_lane, x, ego_id)),
        ):
            if vid is None:
                continue
            sv = world.vehicles[vid].state
            dx = sv.position_x - x
            if abs(dx) > cfg.env.perception_range:
                continue
            obs.sv_blocks[base + offset] = (
                dx,
                sv.position_y - ego.position_y,
                sv.v_x - ego.v_x,
                sv.v_y - ego.v_y,
                sv.heading,
                1.0,
            )
    obs.ov_block[:] = (
        ego.v_x,
        ego.v_y,
        ego.acceleration,
        ego.position_y - highway.lane_center(lane),
        ego.heading,
        1.0 if lane + 1 < highway.lane_count else 0.0,
        1.0 if lane - 1 >= 0 else 0.0,
    )
    return obs


def constrain_action(raw: RawAction, bounds: EnvConfig) -> HybridAction:
    """
    Clip a sampled hybrid action into its branch's admissible box.

    Left changes allow only left-positive lateral acceleration, right changes
    only negative, and following a small symmetric band. The operation is
    idempotent.

    Example:
        >>> constrain_action((Branch.LEFT_CHANGE, 0.0, -1.0), EnvConfig()).a_lateral
        0.0
    """
    if isinstance(raw, HybridAction):
        branch, a_v, a_l = raw.branch, raw.a_vertical, raw.a_lateral
    else:
        branch, a_v, a_l = Branch(int(raw[0])), float(raw[1]), float(raw[2])
    low, high = branch_bounds(branch, bounds)
    return HybridAction(
        branch=branch,
        a_vertical=min(max(a_v, low[0]), high[0]),
        a_lateral=min(max(a_l, low[1]), high[1]),
    )


def branch_bounds(
    branch: Branch, bounds: EnvConfig
) -> tuple[tuple[float, float], tuple[float, float]]:
    """Admissible (low, high) corners of the (vertical, lateral) box of ``branch``."""
    if branch == Branch.LEFT_CHANGE:
        low, high = 0.0, bounds.a_lat_max
    elif branch == Branch.RIGHT_CHANGE:
        low, high = -bounds.a_lat_max, 0.0
    else:
        low, high = -bounds.a_keep, bounds.a_keep
    return (-bounds.a_long_max, low), (bounds.a_long_max, high)


def _normalize(value: float, low: float, high: float) -> float:
    if high <= low:
        return 0.0
    return min(max((value - low) / (high - low), 0.0), 1.0)


def ego_adr(world: WorldState, ego_id: int, cfg: RunConfig) -> float:
    """ADR of the ego from surrounding vehicles within the ADR range."""
    ego = _ego(world, ego_id)
    total = 0.0
    for vid, vehicle in world.vehicles.items():
        if vid == ego_id:
            continue
        if abs(vehicle.state.position_x - ego.position_x) > cfg.env.adr_range:
            continue
        try:
            total += field_force(vehicle.state, ego, cfg.risk_field).magnitude
        except SingularPosition:
            logger.debug("Skipping coincident vehicle in ADR", extra={"vehicle_id": vid})
    return total


def _inverse_ttc_risk(world: WorldState, ego_id: int, cfg: RunConfig) -> float:
    ego = _ego(world, ego_id)
    index = LaneIndex(world.vehicles, cfg.highway)
    vid = index.leader(world.vehicles[ego_id].lane, ego.position_x, ego_id)
    if vid is None:
        return 0.0
    try:
        value = ttc(world.vehicles[vid].state, ego)
    except NegativeGap:
        return 1.0
    if math.isinf(value):
        return 0.0
    if value <= 0:
        return 1.0
    return min(max(cfg.thresholds.ttc / value, 0.0), 1.0)


def compose_reward(
    risk_norm: float,
    speed_norm: float,
    position_norm: float,
    speed: float,
    speed_limit: float,
    collision: bool,
    cfg: RunConfig,
    adr_value: float = 0.0,
) -> RewardBreakdown:
    """
    Weighted reward from already-normalized terms.

    total = -w1*risk + w2*speed - w3*position - w4*k*(v - v_limit) - w5*collision
    """
    w1, w2, w3, w4, w5 = cfg.reward.weights
    speeding = 1 if speed > speed_limit else 0
    r_risk = -w1 * risk_norm
    r_vertical = w2 * speed_norm
    r_position = -w3 * position_norm
    r_limit = -w4 * (speed - speed_limit) if speeding else 0.0
    r_collision = -w5 if collision else 0.0
    return RewardBreakdown(
        r_risk=r_risk,
        r_vertical=r_vertical,
        r_position=r_position,
        r_limit=r_limit,
        r_collision=r_collision,
        total=r_risk + r_vertical + r_position + r_limit + r_collision,
        speeding_flag=speeding,
        risk_norm=risk_norm,
        speed_norm=speed_norm,
        position_norm=position_norm,
        adr=adr_value,
    )


def compute_reward(
    world: WorldState, ego_id: int, outcome: ActionOutcome, cfg: RunConfig
) -> RewardBreakdown:
    """
    Reward of the ego's current situation.

    The risk, speed and position terms are min-max normalized to [0, 1].
    In ADR mode the upper ADR bound is ``reward.adr_max`` or, when that is
    unset, ``outcome.adr_bound`` (the episode's running maximum). In TTC
    mode the risk term is clamp(ttc_threshold / TTC, 0, 1) against the
    same-lane leader.

    Raises:
        MissingEgo: If ``ego_id`` is not in the world.
    """
    ego = _ego(world, ego_id)
    reward, highway = cfg.reward, cfg.highway
    adr_value = ego_adr(world, ego_id, cfg)
    if reward.risk_mode == "TTC":
        risk_norm = _inverse_ttc_risk(world, ego_id, cfg)
    else:
        upper = reward.adr_max
        if upper is None:
            upper = outcome.adr_bound if outcome.adr_bound is not None else max(
                reward.adr_floor, adr_value
            )
        risk_norm = _normalize(adr_value, reward.adr_min, upper)
    speed_max = reward.speed_max if reward.speed_max is not None else highway.speed_limit
    position_max = (
        reward.position_max if reward.position_max is not None else 0.5 * highway.lane_width
    )
    lane = world.vehicles[ego_id].lane
    offset = abs(ego.position_y - highway.lane_center(lane))
    return compose_reward(
        risk_norm=risk_norm,
        speed_norm=_normalize(ego.v_x, reward.speed_min, speed_max),
        position_norm=_normalize(offset, reward.position_min, position_max),
        speed=ego.v_x,
        speed_limit=highway.speed_limit,
        collision=outcome.collision,
        cfg=cfg,
        adr_value=adr_value,
    )


def _insertion_feasible(
    world: WorldState, candidate: VehicleState, lane: int, cfg: RunConfig
) -> bool:
    for vehicle in world.vehicles.values():
        if lane not in occupied_lanes(vehicle.state, cfg.highway):
            continue
        other = vehicle.state
        if other.position_x >= candidate.position_x:
            gap = bumper_gap(candidate, other)
        else:
            gap = bumper_gap(other, candidate)
        if gap < cfg.env.insertion_gap:
            return False
    return True


def insert_ego(world: WorldState, cfg: RunConfig) -> int:
    """
    Insert the ego at a random feasible slot.

    Raises:
        NoFeasibleInsertion: If no slot is found within the retry budget.
    """
    highway, env = cfg.highway, cfg.env
    x_high = min(env.insertion_x_max, highway.length)
    x_low = min(env.insertion_x_min, x_high)
    for attempt in range(env.insertion_retries):
        lane = int(world.rng.integers(highway.lane_count))
        x = float(world.rng.uniform(x_low, x_high))
        candidate = make_vehicle_state(
            VehicleClass.LIGHT,
            env.ego_mass,
            x,
            highway.lane_center(lane),
            highway.initial_speed,
            highway,
        )
        if _insertion_feasible(world, candidate, lane, cfg):
            ego_id = insert_vehicle(world, candidate, lane, ControllerTag.EGO)
            logger.debug(
                "Ego inserted", extra={"ego_id": ego_id, "lane": lane, "attempt": attempt}
            )
            return ego_id
    raise NoFeasibleInsertion(
        f"no feasible ego slot after {env.insertion_retries} attempts"
    )


class HighwayEnv(gym.Env):
    """
    Highway driving environment with a hybrid discrete/continuous action.

    Example:
        >>> env = HighwayEnv(RunConfig.preset("toy"))
        >>> obs = env.env_reset(seed=0)
        >>> obs, reward, done, info = env.env_step((Branch.FOLLOWING, 0.0, 0.0))
    """

    metadata = {"render_modes": []}

    def __init__(self, cfg: Optional[RunConfig] = None) -> None:
        super().__init__()
        self.cfg = cfg or RunConfig()
        env = self.cfg.env
        self.observation_space = spaces.Box(
            low=-np.inf, high=np.inf, shape=(OBS_DIM,), dtype=np.float64
        )
        self.action_space = spaces.Tuple(
            (
                spaces.Discrete(len(Branch)),
                spaces.Box(
                    low=np.array([-env.a_long_max, -env.a_lat_max]),
                    high=np.array([env.a_long_max, env.a_lat_max]),
                    dtype=np.float64,
                ),
            )
        )
        self.scales = ObservationScales(
            distance=env.perception_range,
            speed=self.cfg.highway.speed_limit,
            acceleration=env.a_long_max,
            position=0.5 * self.cfg.highway.lane_width,
        )
        self.world: Optional[WorldState] = None
        self.ego_id: int = -1
        self.steps = 0
        self.done = True
        self.episode_return = 0.0
        self.adr_bound = self.cfg.reward.adr_floor
        self.log: Optional[EpisodeLog] = None
        self.rewards: list[float] = []

    def observation_array(self, obs: Observation) -> np.ndarray:
        """Normalized network input for ``obs``."""
        return obs.to_array(self.scales)

    def env_reset(self, seed: int) -> Observation:
        """
        Start a new episode: warm up ambient traffic, insert the ego.

        Raises:
            NoFeasibleInsertion: If the ego cannot be placed.
        """
        highway = self.cfg.highway
        world = new_world(seed)
        for _ in range(int(round(highway.warmup / highway.dt))):
            world_step(world, self.cfg)
        self.ego_id = insert_ego(world, self.cfg)
        self.world = world
        self.steps = 0
        self.done = False
        self.episode_return = 0.0
        self.rewards = []
        self.adr_bound = max(self.cfg.reward.adr_floor, ego_adr(world, self.ego_id, self.cfg))
        self.log = EpisodeLog(
            subject_id=self.ego_id,
            frame_rate=1.0 / highway.dt,
            records=world_records(world, 0),
            road_width=highway.road_width,
            complete=False,
        )
        logger.info(
            "Episode reset",
            extra={"seed": seed, "ego_id": self.ego_id, "vehicles": len(world.vehicles)},
        )
        return build_observation(world, self.ego_id, self.cfg)

    def env_step(
        self, action: RawAction
    ) -> tuple[Observation, RewardBreakdown, bool, dict[str, Any]]:
        """
        Apply one hybrid action.

        Returns:
            tuple: (observation, reward breakdown, done, info). ``info`` holds
            the tick's events, the termination reason and the ADR value.

        Raises:
            EpisodeFinished: If the episode already ended.
        """
        if self.done or self.world is None or self.log is None:
            raise EpisodeFinished("episode is finished; call env_reset first")
        act = constrain_action(action, self.cfg.env)
        world, events = world_step(self.world, self.cfg, (act.a_vertical, act.a_lateral))
        self.steps += 1

        ego = _ego(world, self.ego_id)
        collided = any(self.ego_id in pair for pair in events.collisions)
        off_road = self.ego_id in events.off_road
        road_end = ego.position_x >= self.cfg.highway.length
        truncated = self.steps >= self.cfg.env.horizon_steps
        collision = collided or off_road

        self.adr_bound = max(self.adr_bound, ego_adr(world, self.ego_id, self.cfg))
        reward = compute_reward(
            world,
            self.ego_id,
            ActionOutcome(collision=collision, adr_bound=self.adr_bound),
            self.cfg,
        )
        self.episode_return += reward.total
        self.rewards.append(reward.total)
        self.log.records.extend(world_records(world, self.steps))

        self.done = collision or road_end or truncated
        reason = (
            "collision" if collided else "off_road" if off_road else "road_end" if road_end
            else "horizon" if truncated else None
        )
        if self.done:
            self.log.complete = True
            logger.info(
                "Episode finished",
                extra={"reason": reason, "steps": self.steps, "return": self.episode_return},
            )
        obs = build_observation(world, self.ego_id, self.cfg)
        info: dict[str, Any] = {
            "events": events,
            "action": act,
            "collision": collision,
            "off_road": off_road,
            "road_end": road_end,
            "truncated": truncated and not (collision or road_end),
            "reason": reason,
            "adr": reward.adr,
            "ego_lane": lane_of(ego.position_y, self.cfg.highway),
        }
        return obs, reward, self.done, info

    def reset(
        self, *, seed: Optional[int] = None, options: Optional[dict[str, Any]] = None
    ) -> tuple[np.ndarray, dict[str, Any]]:
        super().reset(seed=seed)
        episode_seed = seed if seed is not None else int(self.np_random.integers(2**31 - 1))
        obs = self.env_reset(episode_seed)
        return self.observation_array(obs), {"observation": obs}

    def step(
        self, action: Any
    ) -> tuple[np.ndarray, float, bool, bool, dict[str, Any]]:
        branch, continuous = action
        continuous = np.asarray(continuous, dtype=np.float64)
        obs, reward, done, info = self.env_step(
            (branch, float(continuous[0]), float(continuous[1]))
        )
        info["observation"] = obs
        info["reward_breakdown"] = reward
        truncated = bool(info["truncated"])
        return self.observation_array(obs), reward.total, done and not truncated, truncated, info


def staged_world(
    ego: VehicleState, others: list[VehicleState], cfg: RunConfig, seed: int = 0
) -> tuple[WorldState, int, list[int]]:
    """
    Build a world with a hand-placed ego and ambient vehicles.

    Lanes are inferred from lateral positions. Useful for scripted
    scenarios and tests.
    """
    world = new_world(seed)
    ego_id = insert_vehicle(world, ego, lane_of(ego.position_y, cfg.highway), ControllerTag.EGO)
    ids = [
        insert_vehicle(world, state, lane_of(state.position_y, cfg.highway), ControllerTag.AMBIENT)
        for state in others
    ]
    return world, ego_id, ids

