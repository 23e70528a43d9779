"""
Discrete-time microscopic highway simulation.

The road is straight with ``lane_count`` parallel lanes; lane 0 is the
rightmost lane and y grows to the left. Ambient vehicles follow their
leaders with the Intelligent Driver Model (IDM) and change lanes with
MOBIL; a lane change is a fixed-duration cosine ramp of the lateral
position. The ego vehicle is driven by externally supplied longitudinal
and lateral accelerations.

A tick runs, in order: ambient decisions, kinematics for every vehicle,
despawn of ambient vehicles past the road end, Poisson spawning at the
road entry, and a collision scan. Given the seed, configuration and ego
controls the trajectory is fully deterministic.
"""

import logging
import math
from bisect import bisect_left
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np
from shapely.geometry import Polygon

from .config import HighwayConfig, IDMConfig, MOBILConfig, RunConfig
from .errors import NonPositiveGap
from .models import (
    ControllerTag,
    StepEvents,
    TrajectoryRecord,
    VehicleClass,
    VehicleState,
)

logger = logging.getLogger(__name__)


class LaneDecision(str, Enum):
    """Outcome of a lane-change evaluation."""

    STAY = "stay"
    LEFT = "left"
    RIGHT = "right"


@dataclass
class LaneChange:
    """In-progress ambient lane change."""

    source_lane: int
    target_lane: int
    y_start: float
    y_end: float
    elapsed: float = 0.0
    switched: bool = False


@dataclass
class SimVehicle:
    """A vehicle inside the world, with its controller bookkeeping."""

    vehicle_id: int
    state: VehicleState
    lane: int
    tag: ControllerTag
    lane_change: Optional[LaneChange] = None
    cooldown_until: float = 0.0


@dataclass
class PendingArrival:
    """An arrival drawn by the spawner but not yet placed on the road."""

    lane: int
    vclass: VehicleClass
    mass: float
    speed: float


@dataclass
class WorldState:
    """Complete mutable state of one simulation."""

    rng: np.random.Generator
    step_count: int = 0
    time: float = 0.0
    vehicles: dict[int, SimVehicle] = field(default_factory=dict)
    next_id: int = 0
    backlog: deque[PendingArrival] = field(default_factory=deque)
    arrivals_total: int = 0
    spawned_total: int = 0
    despawned_total: int = 0

    def vehicle_states(self) -> dict[int, VehicleState]:
        return {vid: v.state for vid, v in self.vehicles.items()}


@dataclass(frozen=True)
class MobilNeighbors:
    """Leaders and followers around a lane-change candidate.

    Lane availability flags are False at the road edges.
    """

    current_leader: Optional[VehicleState] = None
    current_follower: Optional[VehicleState] = None
    left_leader: Optional[VehicleState] = None
    left_follower: Optional[VehicleState] = None
    right_leader: Optional[VehicleState] = None
    right_follower: Optional[VehicleState] = None
    left_available: bool = True
    right_available: bool = True


def new_world(seed: int) -> WorldState:
    """Create an empty world with a PCG64 generator seeded by ``seed``."""
    return WorldState(rng=np.random.Generator(np.random.PCG64(seed)))


def bumper_gap(follower: VehicleState, leader: VehicleState) -> float:
    """Longitudinal clearance between the follower's front and the leader's rear."""
    return (
        leader.position_x
        - follower.position_x
        - 0.5 * (leader.length + follower.length)
    )


def idm_acceleration(
    follower: VehicleState,
    leader: Optional[VehicleState],
    params: IDMConfig,
    desired_speed: Optional[float] = None,
) -> float:
    """
    Intelligent Driver Model acceleration of ``follower``.

    Args:
        follower: Vehicle being controlled.
        leader: Vehicle ahead in the same lane, or None on a free road.
        params: IDM parameters.
        desired_speed: Overrides ``params.v0``; required when ``params.v0``
            is None.

    Returns:
        float: Acceleration in m/s^2.

    Raises:
        NonPositiveGap: If the bumper gap to the leader is <= 0.
        ValueError: If no desired speed is known.
    """
    v0 = desired_speed if desired_speed is not None else params.v0
    if v0 is None:
        raise ValueError("IDM desired speed is not set")
    v = follower.v_x
    free = 1.0 - (v / v0) ** params.delta
    if leader is None:
        return params.a_max * free
    gap = bumper_gap(follower, leader)
    if gap <= 0:
        raise NonPositiveGap(f"bumper gap {gap:.3f} m is not positive")
    dv = v - leader.v_x
    s_star = params.s0 + max(
        0.0, v * params.t_headway + v * dv / (2.0 * math.sqrt(params.a_max * params.b_comf))
    )
    return params.a_max * (free - (s_star / gap) ** 2)


def _lane_gain(
    subject: VehicleState,
    neighbors: MobilNeighbors,
    target_leader: Optional[VehicleState],
    target_follower: Optional[VehicleState],
    mobil: MOBILConfig,
    idm: IDMConfig,
    v0: float,
) -> Optional[float]:
    """MOBIL incentive for one target lane, None when unsafe."""
    try:
        own_now = idm_acceleration(subject, neighbors.current_leader, idm, v0)
        own_after = idm_acceleration(subject, target_leader, idm, v0)
        new_gain = 0.0
        if target_follower is not None:
            new_now = idm_acceleration(target_follower, target_leader, idm, v0)
            new_after = idm_acceleration(target_follower, subject, idm, v0)
            if new_after < -mobil.b_safe:
                return None
            new_gain = new_after - new_now
        old_gain = 0.0
        if neighbors.current_follower is not None:
            old_now = idm_acceleration(neighbors.current_follower, subject, idm, v0)
            old_after = idm_acceleration(
                neighbors.current_follower, neighbors.current_leader, idm, v0
            )
            old_gain = old_after - old_now
    except NonPositiveGap:
        return None
    return own_after - own_now + mobil.politeness * (new_gain + old_gain)


def mobil_lane_change(
    subject: VehicleState,
    neighbors: MobilNeighbors,
    mobil: MOBILConfig,
    idm: IDMConfig,
    desired_speed: Optional[float] = None,
) -> LaneDecision:
    """
    MOBIL lane-change decision.

    A side lane is chosen when its incentive exceeds the threshold and the
    new follower's induced acceleration stays >= -b_safe. Ties prefer stay,
    then left, then right.

    Args:
        subject: Vehicle considering a change.
        neighbors: Resolved leaders and followers.
        mobil: MOBIL parameters.
        idm: IDM parameters used to evaluate accelerations.
        desired_speed: IDM desired speed override.

    Returns:
        LaneDecision: stay, left or right.
    """
    v0 = desired_speed if desired_speed is not None else idm.v0
    if v0 is None:
        raise ValueError("IDM desired speed is not set")
    best = LaneDecision.STAY
    best_gain = mobil.threshold
    candidates = (
        (LaneDecision.LEFT, neighbors.left_available, neighbors.left_leader, neighbors.left_follower),
        (LaneDecision.RIGHT, neighbors.right_available, neighbors.right_leader, neighbors.right_follower),
    )
    for decision, available, leader, follower in candidates:
        if not available:
            continue
        gain = _lane_gain(subject, neighbors, leader, follower, mobil, idm, v0)
        if gain is not None and gain > best_gain:
            best, best_gain = decision, gain
    return best


def step_kinematics(
    v: VehicleState, a_long: float, a_lat: float, dt: float
) -> VehicleState:
    """
    Advance one vehicle by ``dt`` under constant accelerations.

    The longitudinal speed never drops below zero: a vehicle braking to a
    stop within the step stops there.

    Args:
        v: Current state.
        a_long: Longitudinal acceleration (m/s^2).
        a_lat: Lateral acceleration, left-positive (m/s^2).
        dt: Step length (s).

    Returns:
        VehicleState: State after the step.
    """
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    v_long, v_lat = v.v_x, v.v_y
    if a_long < 0 and v_long + a_long * dt < 0:
        t_stop = -v_long / a_long
        dx = v_long * t_stop + 0.5 * a_long * t_stop**2
        v_long_new = 0.0
    else:
        dx = v_long * dt + 0.5 * a_long * dt**2
        v_long_new = max(0.0, v_long + a_long * dt)
    dy = v_lat * dt + 0.5 * a_lat * dt**2
    v_lat_new = v_lat + a_lat * dt
    heading = math.atan2(v_lat_new, v_long_new)
    return replace(
        v,
        position_x=v.position_x + dx,
        position_y=v.position_y + dy,
        speed=math.hypot(v_long_new, v_lat_new),
        heading=heading,
        acceleration=a_long * math.cos(heading) + a_lat * math.sin(heading),
    )


def lane_of(y: float, highway: HighwayConfig) -> int:
    """Lane index containing lateral position ``y``, clamped to the road."""
    lane = int(math.floor(y / highway.lane_width))
    return min(max(lane, 0), highway.lane_count - 1)


def occupied_lanes(state: VehicleState, highway: HighwayConfig) -> list[int]:
    """Lanes whose strip overlaps the vehicle's lateral extent."""
    low = state.position_y - 0.5 * state.width
    high = state.position_y + 0.5 * state.width
    lanes = []
    for lane in range(highway.lane_count):
        if low < (lane + 1) * highway.lane_width and high > lane * highway.lane_width:
            lanes.append(lane)
    return lanes


class LaneIndex:
    """Per-lane longitudinal ordering of vehicles for neighbor queries."""

    def __init__(self, vehicles: dict[int, SimVehicle], highway: HighwayConfig) -> None:
        lanes: list[list[tuple[float, int]]] = [[] for _ in range(highway.lane_count)]
        for vid, vehicle in vehicles.items():
            for lane in occupied_lanes(vehicle.state, highway):
                lanes[lane].append((vehicle.state.position_x, vid))
        for entries in lanes:
            entries.sort()
        self._entries = lanes
        self._xs = [[x for x, _ in entries] for entries in lanes]

    def leader(self, lane: int, x: float, exclude: int) -> Optional[int]:
        """Nearest vehicle at or ahead of ``x`` in ``lane``."""
        if not 0 <= lane < len(self._entries):
            return None
        entries = self._entries[lane]
        for i in range(bisect_left(self._xs[lane], x), len(entries)):
            if entries[i][1] != exclude:
                return entries[i][1]
        return None

    def follower(self, lane: int, x: float, exclude: int) -> Optional[int]:
        """Nearest vehicle strictly behind ``x`` in ``lane``."""
        if not 0 <= lane < len(self._entries):
            return None
        entries = self._entries[lane]
        for i in range(bisect_left(self._xs[lane], x) - 1, -1, -1):
            if entries[i][1] != exclude:
                return entries[i][1]
        return None


def _state_or_none(world: WorldState, vid: Optional[int]) -> Optional[VehicleState]:
    return None if vid is None else world.vehicles[vid].state


def _mobil_neighbors(
    world: WorldState, index: LaneIndex, vehicle: SimVehicle, highway: HighwayConfig
) -> MobilNeighbors:
    x, vid, lane = vehicle.state.position_x, vehicle.vehicle_id, vehicle.lane
    left, right = lane + 1, lane - 1
    return MobilNeighbors(
        current_leader=_state_or_none(world, index.leader(lane, x, vid)),
        current_follower=_state_or_none(world, index.follower(lane, x, vid)),
        left_leader=_state_or_none(world, index.leader(left, x, vid)),
        left_follower=_state_or_none(world, index.follower(left, x, vid)),
        right_leader=_state_or_none(world, index.leader(right, x, vid)),
        right_follower=_state_or_none(world, index.follower(right, x, vid)),
        left_available=left < highway.lane_count,
        right_available=right >= 0,
    )


def _following_acceleration(
    world: WorldState, index: LaneIndex, vehicle: SimVehicle, cfg: RunConfig
) -> float:
    lanes = [vehicle.lane]
    if vehicle.lane_change is not None:
        lanes = [vehicle.lane_change.source_lane, vehicle.lane_change.target_lane]
    v0 = cfg.idm.desired_speed(cfg.highway)
    accel = math.inf
    for lane in lanes:
        leader = _state_or_none(
            world, index.leader(lane, vehicle.state.position_x, vehicle.vehicle_id)
        )
        try:
            candidate = idm_acceleration(vehicle.state, leader, cfg.idm, v0)
        except NonPositiveGap:
            candidate = -cfg.highway.emergency_decel
        accel = min(accel, candidate)
    return min(max(accel, -cfg.highway.emergency_decel), cfg.idm.a_max)


def _advance_ambient(
    vehicle: SimVehicle, a_long: float, highway: HighwayConfig, events: StepEvents
) -> None:
    dt = highway.dt
    moved = step_kinematics(replace(vehicle.state, heading=0.0, speed=vehicle.state.v_x), a_long, 0.0, dt)
    change = vehicle.lane_change
    if change is None:
        vehicle.state = moved
        return

    duration = highway.lane_change_duration
    change.elapsed = min(change.elapsed + dt, duration)
    phase = math.pi * change.elapsed / duration
    span = change.y_end - change.y_start
    y = change.y_start + span * 0.5 * (1.0 - math.cos(phase))
    v_lat = span * 0.5 * math.sin(phase) * math.pi / duration
    v_long = moved.speed
    heading = math.atan2(v_lat, v_long)
    vehicle.state = replace(
        moved,
        position_y=y,
        speed=math.hypot(v_long, v_lat),
        heading=heading,
        acceleration=a_long * math.cos(heading),
    )
    if not change.switched and change.elapsed >= 0.5 * duration:
        vehicle.lane = change.target_lane
        change.switched = True
    if change.elapsed >= duration:
        vehicle.state = replace(vehicle.state, position_y=change.y_end, heading=0.0, speed=v_long)
        vehicle.lane = change.target_lane
        vehicle.lane_change = None
        events.lane_changes_completed.append(vehicle.vehicle_id)


def insert_vehicle(
    world: WorldState, state: VehicleState, lane: int, tag: ControllerTag
) -> int:
    """Place a vehicle in the world and return its new id."""
    vid = world.next_id
    world.next_id += 1
    world.vehicles[vid] = SimVehicle(vehicle_id=vid, state=state, lane=lane, tag=tag)
    return vid


def make_vehicle_state(
    vclass: VehicleClass,
    mass: float,
    x: float,
    y: float,
    speed: float,
    highway: HighwayConfig,
) -> VehicleState:
    """Heading-0 state with the class's configured footprint."""
    length, width = highway.heavy_size if vclass == VehicleClass.HEAVY else highway.light_size
    return VehicleState(
        position_x=x,
        position_y=y,
        speed=speed,
        heading=0.0,
        acceleration=0.0,
        mass=mass,
        vclass=vclass,
        length=length,
        width=width,
    )


def _entry_blocked(
    world: WorldState, lane: int, length: float, highway: HighwayConfig
) -> bool:
    for vehicle in world.vehicles.values():
        if lane not in occupied_lanes(vehicle.state, highway):
            continue
        rear = vehicle.state.position_x - 0.5 * vehicle.state.length
        if rear < length + highway.spawn_safety_gap:
            return True
    return False


def _draw_arrival(world: WorldState, highway: HighwayConfig) -> PendingArrival:
    rng = world.rng
    lane = int(rng.integers(highway.lane_count))
    heavy = bool(rng.random() < highway.heavy_fraction)
    low, high = highway.heavy_mass if heavy else highway.light_mass
    mass = float(rng.uniform(low, high))
    speed = highway.initial_speed
    if highway.initial_speed_jitter > 0:
        jitter = highway.initial_speed_jitter
        speed = max(0.0, speed + float(rng.uniform(-jitter, jitter)))
    return PendingArrival(
        lane=lane,
        vclass=VehicleClass.HEAVY if heavy else VehicleClass.LIGHT,
        mass=mass,
        speed=speed,
    )


def spawn_vehicles(
    world: WorldState, cfg: HighwayConfig, events: Optional[StepEvents] = None
) -> WorldState:
    """
    Draw this step's Poisson arrivals and place them at the road entry.

    Each arrival picks a uniform lane, a class and a mass. Arrivals whose
    entry is blocked wait in a FIFO backlog and are retried on later steps
    before new arrivals; at most one vehicle enters a lane per step.

    Args:
        world: World to spawn into (modified in place).
        cfg: Highway configuration.
        events: Optional event sink receiving the spawned ids.

    Returns:
        WorldState: The same world.
    """
    count = int(world.rng.poisson(cfg.arrival_rate * cfg.dt)) if cfg.arrival_rate > 0 else 0
    world.arrivals_total += count
    for _ in range(count):
        world.backlog.append(_draw_arrival(world, cfg))

    waiting: deque[PendingArrival] = deque()
    used_lanes: set[int] = set()
    while world.backlog:
        arrival = world.backlog.popleft()
        length = cfg.heavy_size[0] if arrival.vclass == VehicleClass.HEAVY else cfg.light_size[0]
        if arrival.lane in used_lanes or _entry_blocked(world, arrival.lane, length, cfg):
            waiting.append(arrival)
            continue
        state = make_vehicle_state(
            arrival.vclass,
            arrival.mass,
            0.5 * length,
            cfg.lane_center(arrival.lane),
            arrival.speed,
            cfg,
        )
        vid = insert_vehicle(world, state, arrival.lane, ControllerTag.AMBIENT)
        used_lanes.add(arrival.lane)
        world.spawned_total += 1
        if events is not None:
            events.spawned.append(vid)
    world.backlog = waiting
    return world


def footprint(state: VehicleState) -> Polygon:
    """Heading-aligned rectangle covered by the vehicle."""
    c, s = math.cos(state.heading), math.sin(state.heading)
    hl, hw = 0.5 * state.length, 0.5 * state.width
    corners = []
    for sl, sw in ((1, 1), (1, -1), (-1, -1), (-1, 1)):
        corners.append(
            (
                state.position_x + sl * hl * c - sw * hw * s,
                state.position_y + sl * hl * s + sw * hw * c,
            )
        )
    return Polygon(corners)


def footprints_overlap(a: VehicleState, b: VehicleState) -> bool:
    """Strict overlap of two footprints; touching edges do not count."""
    reach = 0.5 * (math.hypot(a.length, a.width) + math.hypot(b.length, b.width))
    if abs(a.position_x - b.position_x) > reach or abs(a.position_y - b.position_y) > reach:
        return False
    pa, pb = footprint(a), footprint(b)
    return bool(pa.intersects(pb) and not pa.touches(pb))


def detect_collisions(world: WorldState) -> list[tuple[int, int]]:
    """Id pairs (low, high) of all vehicles whose footprints overlap."""
    items = sorted(world.vehicles.items(), key=lambda item: item[1].state.position_x)
    pairs: list[tuple[int, int]] = []
    if not items:
        return pairs
    reach = max(math.hypot(v.state.length, v.state.width) for _, v in items)
    for i, (id_a, a) in enumerate(items):
        for id_b, b in items[i + 1 :]:
            if b.state.position_x - a.state.position_x > reach:
                break
            if footprints_overlap(a.state, b.state):
                pairs.append((min(id_a, id_b), max(id_a, id_b)))
    pairs.sort()
    return pairs


def world_step(
    world: WorldState,
    cfg: RunConfig,
    ego_controls: Optional[tuple[float, float]] = None,
) -> tuple[WorldState, StepEvents]:
    """
    Advance the world by one tick.

    Args:
        world: World to advance (modified in place).
        cfg: Run configuration (highway, IDM and MOBIL sections are used).
        ego_controls: (a_long, a_lat) applied to every ego vehicle; None
            lets the ego coast.

    Returns:
        tuple: The advanced world and the tick's events.
    """
    highway = cfg.highway
    events = StepEvents()
    index = LaneIndex(world.vehicles, highway)
    v0 = cfg.idm.desired_speed(highway)

    accelerations: dict[int, float] = {}
    for vid, vehicle in world.vehicles.items():
        if vehicle.tag != ControllerTag.AMBIENT:
            continue
        if vehicle.lane_change is None and world.time >= vehicle.cooldown_until:
            neighbors = _mobil_neighbors(world, index, vehicle, highway)
            decision = mobil_lane_change(vehicle.state, neighbors, cfg.mobil, cfg.idm, v0)
            if decision != LaneDecision.STAY:
                target = vehicle.lane + (1 if decision == LaneDecision.LEFT else -1)
                vehicle.lane_change = LaneChange(
                    source_lane=vehicle.lane,
                    target_lane=target,
                    y_start=vehicle.state.position_y,
                    y_end=highway.lane_center(target),
                )
                vehicle.cooldown_until = (
                    world.time + highway.lane_change_duration + highway.lane_change_cooldown
                )
                logger.debug(
                    "Ambient lane change started",
                    extra={"vehicle_id": vid, "decision": decision.value},
                )
        accelerations[vid] = _following_acceleration(world, index, vehicle, cfg)

    a_long, a_lat = ego_controls if ego_controls is not None else (0.0, 0.0)
    for vid, vehicle in world.vehicles.items():
        if vehicle.tag == ControllerTag.AMBIENT:
            _advance_ambient(vehicle, accelerations[vid], highway, events)
            continue
        vehicle.state = step_kinematics(vehicle.state, a_long, a_lat, highway.dt)
        y = vehicle.state.position_y
        if y < 0.0 or y > highway.road_width:
            events.off_road.append(vid)
        new_lane = lane_of(y, highway)
        if new_lane != vehicle.lane:
            vehicle.lane = new_lane
            events.lane_changes_completed.append(vid)

    for vid in [
        vid
        for vid, vehicle in world.vehicles.items()
        if vehicle.tag == ControllerTag.AMBIENT
        and vehicle.state.position_x - 0.5 * vehicle.state.length > highway.length
    ]:
        del world.vehicles[vid]
        world.despawned_total += 1
        events.despawned.append(vid)

    spawn_vehicles(world, highway, events)

    world.step_count += 1
    world.time = world.step_count * highway.dt
    events.collisions = detect_collisions(world)
    return world, events


def world_records(world: WorldState, frame: int) -> list[TrajectoryRecord]:
    """Snapshot every vehicle as trajectory records, in id order."""
    records = []
    for vid in sorted(world.vehicles):
        vehicle = world.vehicles[vid]
        s = vehicle.state
        records.append(
            TrajectoryRecord(
                frame=frame,
                vehicle_id=vid,
                x=s.position_x,
                y=s.position_y,
                v_x=s.v_x,
                v_y=s.v_y,
                a_x=s.a_x,
                a_y=s.a_y,
                lane=vehicle.lane,
                vclass=s.vclass,
                mass=s.mass,
                length=s.length,
                width=s.width,
            )
        )
    return records
