"""
Surrogate safety measures and per-episode safety reports.

Pairwise measures (TTC, DRAC, PET) feed a union conflict rule; conflicting
pairs are weighted by their potential collision energy (PCE) and summed into
the episode's PCEC. ``analyze_episode`` turns a trajectory log into an
EpisodeReport plus the list of conflict events, where an event is a maximal
run of consecutive flagged frames for one subject/other pair.

Everything here is a pure function of its inputs; logs are never mutated.
"""

import logging
import math
from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from typing import Optional

from shapely.geometry import Polygon

from .config import RiskFieldParams, ThresholdConfig
from .errors import IncompleteLog, NegativeGap, SingularPosition
from .models import (
    ConflictEvent,
    EpisodeLog,
    EpisodeReport,
    TrajectoryRecord,
    VehicleClass,
    VehicleState,
)
from .riskfield import field_force
from .simworld import bumper_gap, footprint, footprints_overlap

logger = logging.getLogger(__name__)

TRIGGER_TTC = "TTC"
TRIGGER_DRAC = "DRAC"
TRIGGER_PET = "PET"


def _closing(leader: VehicleState, follower: VehicleState) -> tuple[float, float]:
    gap = bumper_gap(follower, leader)
    if gap < 0:
        raise NegativeGap(f"vehicles overlap by {-gap:.3f} m")
    return gap, follower.v_x - leader.v_x


def ttc(leader: VehicleState, follower: VehicleState) -> float:
    """
    Time to collision of a same-lane follower behind its leader.

    Returns:
        float: gap / closing speed when closing, otherwise ``inf``.

    Raises:
        NegativeGap: If the pair already overlaps.

    Example:
        >>> ttc(leader_30m_ahead_at_10, follower_at_20)
        3.0
    """
    gap, closing = _closing(leader, follower)
    if closing <= 0:
        return math.inf
    return gap / closing


def drac(leader: VehicleState, follower: VehicleState) -> float:
    """
    Deceleration rate the follower needs to avoid a crash.

    Returns:
        float: closing^2 / (2 gap) when closing, otherwise 0.

    Raises:
        NegativeGap: If the pair already overlaps.
    """
    gap, closing = _closing(leader, follower)
    if closing <= 0:
        return 0.0
    if gap == 0:
        return math.inf
    return closing**2 / (2.0 * gap)


TimedStates = Sequence[tuple[float, VehicleState]]


def _occupies(state: VehicleState, area: Polygon) -> bool:
    shape = footprint(state)
    return bool(shape.intersects(area) and not shape.touches(area))


def _occupancy(traj: TimedStates, area: Polygon) -> Optional[tuple[float, float]]:
    """First occupancy interval as (entry time, exit time); exit may be inf."""
    entry: Optional[float] = None
    for time, state in traj:
        inside = _occupies(state, area)
        if entry is None and inside:
            entry = time
        elif entry is not None and not inside:
            return entry, time
    return None if entry is None else (entry, math.inf)


def pet(first_traj: TimedStates, second_traj: TimedStates, conflict_area: Polygon) -> float:
    """
    Post-encroachment time at a conflict area.

    The first vehicle's exit is the first sample after its occupancy at
    which it no longer overlaps the area; the second's entry is its first
    overlapping sample.

    Args:
        first_traj: Time-ordered (time, state) samples of the first vehicle.
        second_traj: Samples of the second vehicle, on the same clock.
        conflict_area: Polygon both vehicles pass through.

    Returns:
        float: Entry minus exit; 0 when the occupancies overlap; ``inf`` when
        either vehicle never occupies the area or the second one passes
        before the first.
    """
    first = _occupancy(first_traj, conflict_area)
    second = _occupancy(second_traj, conflict_area)
    if first is None or second is None:
        return math.inf
    (first_in, first_out), (second_in, second_out) = first, second
    if second_in >= first_out:
        return second_in - first_out
    if second_out <= first_in:
        return math.inf
    return 0.0


def conflict_flag(
    ttc_value: float, drac_value: float, pet_value: float, thresholds: ThresholdConfig
) -> tuple[bool, frozenset[str]]:
    """
    Union conflict rule.

    A pair conflicts iff TTC < ttc threshold, DRAC > drac threshold or
    PET < pet threshold; boundary values do not trigger.

    Returns:
        tuple: (flag, set of triggering measure names).
    """
    triggers = set()
    if ttc_value < thresholds.ttc:
        triggers.add(TRIGGER_TTC)
    if drac_value > thresholds.drac:
        triggers.add(TRIGGER_DRAC)
    if pet_value < thresholds.pet:
        triggers.add(TRIGGER_PET)
    return bool(triggers), frozenset(triggers)


def pce(
    follower_mass: float,
    follower_speed: float,
    leader_mass: float,
    leader_speed: float,
    alpha_f: float = 1.0,
    alpha_l: float = 1.0,
) -> float:
    """
    Potential collision energy of a follower/leader pair, in joules.

    When the follower's m*v^2 exceeds the leader's, the energy is half their
    difference; otherwise (equality included) it is half the follower's m*v^2.
    """
    if follower_mass <= 0 or leader_mass <= 0:
        raise ValueError("masses must be > 0")
    if follower_speed < 0 or leader_speed < 0:
        raise ValueError("speeds must be >= 0")
    follower_energy = follower_mass * follower_speed**2
    difference = follower_energy - leader_mass * leader_speed**2
    if difference > 0:
        return 0.5 * alpha_l * alpha_f * difference
    return 0.5 * alpha_l * alpha_f * follower_energy


@dataclass(frozen=True)
class PairState:
    """Measures and energies of one pair at one instant."""

    follower_mass: float
    follower_speed: float
    leader_mass: float
    leader_speed: float
    ttc: float = math.inf
    drac: float = 0.0
    pet: float = math.inf

    def energy(self) -> float:
        return pce(self.follower_mass, self.follower_speed, self.leader_mass, self.leader_speed)


def pcec(timeline: Iterable[Iterable[PairState]], thresholds: ThresholdConfig) -> float:
    """
    Episode PCEC: sum of PCE over every conflict-flagged pair and step.

    Args:
        timeline: Per step, the states of all candidate pairs.
        thresholds: Conflict thresholds.
    """
    total = 0.0
    for step in timeline:
        for pair in step:
            flagged, _ = conflict_flag(pair.ttc, pair.drac, pair.pet, thresholds)
            if flagged:
                total += pair.energy()
    return total


@dataclass
class _FrameView:
    time: float
    subject: TrajectoryRecord
    others: dict[int, TrajectoryRecord]


def _frames(log: EpisodeLog) -> list[_FrameView]:
    by_frame: dict[int, dict[int, TrajectoryRecord]] = defaultdict(dict)
    for record in log.records:
        by_frame[record.frame][record.vehicle_id] = record
    views = []
    for frame in sorted(by_frame):
        vehicles = by_frame[frame]
        subject = vehicles.pop(log.subject_id, None)
        if subject is None:
            continue
        views.append(_FrameView(time=frame / log.frame_rate, subject=subject, others=vehicles))
    return views


def _in_corridor(a: TrajectoryRecord, b: TrajectoryRecord) -> bool:
    return a.lane == b.lane or abs(a.y - b.y) < 0.5 * (a.width + b.width)


def _lane_change_pets(
    views: list[_FrameView],
    states: list[VehicleState],
    window: float,
    perception: float,
) -> dict[tuple[int, int], float]:
    """PET of the subject against nearby vehicles at each lane crossing."""
    pets: dict[tuple[int, int], float] = {}
    for k in range(1, len(views)):
        if views[k].subject.lane == views[k - 1].subject.lane:
            continue
        area = footprint(states[k])
        t_k = views[k].time
        span = [i for i in range(len(views)) if abs(views[i].time - t_k) <= window]
        subject_traj = [(views[i].time, states[i]) for i in span]
        for vid, record in views[k].others.items():
            if abs(record.x - views[k].subject.x) > perception:
                continue
            other_traj = [
                (views[i].time, views[i].others[vid].to_state())
                for i in span
                if vid in views[i].others
            ]
            value = min(
                pet(subject_traj, other_traj, area), pet(other_traj, subject_traj, area)
            )
            pets[(k, vid)] = value
    return pets


def _frame_adr(
    subject: VehicleState,
    view: _FrameView,
    params: RiskFieldParams,
    adr_range: float,
) -> float:
    total = 0.0
    for record in view.others.values():
        if abs(record.x - view.subject.x) > adr_range:
            continue
        try:
            total += field_force(record.to_state(), subject, params).magnitude
        except SingularPosition:
            continue
    return total


def analyze_episode(
    log: EpisodeLog,
    params: RiskFieldParams,
    thresholds: ThresholdConfig,
    adr_range: float = 50.0,
    perception_range: float = 50.0,
) -> tuple[EpisodeReport, list[ConflictEvent]]:
    """
    Aggregate one subject's episode into a report and its conflict events.

    Args:
        log: Complete episode log.
        params: Risk-field coefficients for the ADR.
        thresholds: Conflict thresholds and PET window.
        adr_range: Longitudinal range of SVs counted in the ADR.
        perception_range: Longitudinal range of candidate conflict partners.

    Returns:
        tuple: (EpisodeReport, conflict events in start-time order).

    Raises:
        IncompleteLog: If the log is not complete or never shows the subject.
    """
    if not log.complete:
        raise IncompleteLog("episode log is not complete")
    views = _frames(log)
    if not views:
        raise IncompleteLog(f"subject {log.subject_id} has no records")
    states = [view.subject.to_state() for view in views]

    speeds = [view.subject.v_x for view in views]
    lane_changes = sum(
        1 for prev, cur in zip(views, views[1:], strict=False) if cur.subject.lane != prev.subject.lane
    )

    collisions = 0
    colliding_before = False
    adr_values = []
    for view, state in zip(views, states, strict=True):
        colliding = False
        if log.road_width is not None and not 0.0 <= view.subject.y <= log.road_width:
            colliding = True
        for record in view.others.values():
            if colliding:
                break
            if abs(record.x - view.subject.x) <= 0.5 * (record.length + view.subject.length) + 1.0:
                colliding = footprints_overlap(state, record.to_state())
        if colliding and not colliding_before:
            collisions += 1
        colliding_before = colliding
        adr_values.append(_frame_adr(state, view, params, adr_range))

    pets = _lane_change_pets(views, states, thresholds.pet_window, perception_range)

    # Per other vehicle: list of (view index, triggers, pce).
    flagged: dict[int, list[tuple[int, frozenset[str], float]]] = defaultdict(list)
    for k, (view, state) in enumerate(zip(views, states, strict=True)):
        for vid, record in view.others.items():
            if abs(record.x - view.subject.x) > perception_range:
                continue
            pet_value = pets.get((k, vid), math.inf)
            in_corridor = _in_corridor(view.subject, record)
            if not in_corridor and math.isinf(pet_value):
                continue
            other = record.to_state()
            if other.position_x >= state.position_x:
                leader, follower = other, state
            else:
                leader, follower = state, other
            ttc_value, drac_value = math.inf, 0.0
            if in_corridor:
                try:
                    ttc_value = ttc(leader, follower)
                    drac_value = drac(leader, follower)
                except NegativeGap:
                    if math.isinf(pet_value):
                        continue
            is_conflict, triggers = conflict_flag(ttc_value, drac_value, pet_value, thresholds)
            if is_conflict:
                energy = pce(follower.mass, follower.speed, leader.mass, leader.speed)
                flagged[vid].append((k, triggers, energy))

    events: list[ConflictEvent] = []
    for vid, entries in flagged.items():
        run: list[tuple[int, frozenset[str], float]] = []
        for entry in entries + [(-2, frozenset(), 0.0)]:
            if run and entry[0] != run[-1][0] + 1:
                first, last = run[0][0], run[-1][0]
                other_class = views[first].others[vid].vclass
                energy = 0.0
                for _, _, value in run:
                    energy += value
                events.append(
                    ConflictEvent(
                        time=views[first].time,
                        end_time=views[last].time,
                        pair=(log.subject_id, vid),
                        trigger=frozenset().union(*(t for _, t, _ in run)),
                        heavy_involved=other_class == VehicleClass.HEAVY
                        or views[first].subject.vclass == VehicleClass.HEAVY,
                        other_class=other_class,
                        steps=len(run),
                        pce=energy,
                    )
                )
                run = []
            if entry[0] >= 0:
                run.append(entry)
    events.sort(key=lambda event: (event.time, event.pair[1]))

    pcec_total = 0.0
    for event in events:
        pcec_total += event.pce
    heavy = sum(1 for event in events if event.other_class == VehicleClass.HEAVY)
    report = EpisodeReport(
        avg_speed=math.fsum(speeds) / len(speeds),
        lane_changes=lane_changes,
        collisions=collisions,
        conflicts=len(events),
        heavy_in_conflicts=heavy,
        light_in_conflicts=len(events) - heavy,
        pcec=pcec_total,
        mean_adr=math.fsum(adr_values) / len(adr_values),
    )
    logger.debug(
        "Episode analysed",
        extra={"subject_id": log.subject_id, "frames": len(views), "conflicts": len(events)},
    )
    return report, events


def episode_report(
    log: EpisodeLog,
    params: RiskFieldParams,
    thresholds: ThresholdConfig,
    adr_range: float = 50.0,
    perception_range: float = 50.0,
) -> EpisodeReport:
    """EpisodeReport of ``log``; see ``analyze_episode``."""
    report, _ = analyze_episode(log, params, thresholds, adr_range, perception_range)
    return report
