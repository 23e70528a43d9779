"""
Typed domain models for the risk-aware driving toolkit.

This module defines the dataclasses shared by the simulator, the decision
environment, the safety metrics and the trajectory I/O layer. Every model
can be converted to and from a plain dictionary for logging and manifests.
"""

import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Any, Optional

import numpy as np

OBS_SLOTS = 6
SV_BLOCK_SIZE = 6
OV_BLOCK_SIZE = 7
OBS_DIM = OBS_SLOTS * SV_BLOCK_SIZE + OV_BLOCK_SIZE

# Observation slot order.
SLOT_NAMES = (
    "left_lead",
    "left_follow",
    "same_lead",
    "same_follow",
    "right_lead",
    "right_follow",
)


class VehicleClass(str, Enum):
    """Vehicle weight class."""

    LIGHT = "light"
    HEAVY = "heavy"


class ControllerTag(str, Enum):
    """Who drives a vehicle in the simulation."""

    EGO = "ego"
    AMBIENT = "ambient"


class Branch(IntEnum):
    """Discrete branch of the hybrid action."""

    LEFT_CHANGE = 0
    FOLLOWING = 1
    RIGHT_CHANGE = 2

    @property
    def label(self) -> str:
        return {0: "leftchange", 1: "following", 2: "rightchange"}[int(self)]


class BaseModel:
    """Base model with common functionality for all domain models."""

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary representation."""
        raise NotImplementedError("Subclasses must implement to_dict method.")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "BaseModel":
        """Create instance from dictionary."""
        raise NotImplementedError("Subclasses must implement from_dict method.")


@dataclass(frozen=True)
class VehicleState(BaseModel):
    """Pose, kinematics, mass and footprint of one vehicle.

    ``heading`` is the planar direction of travel, atan2(v_y, v_x), with y
    increasing to the left. ``acceleration`` is signed along the heading.
    """

    position_x: float
    position_y: float
    speed: float
    heading: float
    acceleration: float
    mass: float
    vclass: VehicleClass
    length: float
    width: float

    def __post_init__(self) -> None:
        if not self.mass > 0:
            raise ValueError(f"mass must be > 0, got {self.mass}")
        if not self.length > 0:
            raise ValueError(f"length must be > 0, got {self.length}")
        if not self.width > 0:
            raise ValueError(f"width must be > 0, got {self.width}")
        if not self.speed >= 0:
            raise ValueError(f"speed must be >= 0, got {self.speed}")

    @property
    def v_x(self) -> float:
        return self.speed * math.cos(self.heading)

    @property
    def v_y(self) -> float:
        return self.speed * math.sin(self.heading)

    @property
    def a_x(self) -> float:
        return self.acceleration * math.cos(self.heading)

    @property
    def a_y(self) -> float:
        return self.acceleration * math.sin(self.heading)

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary representation."""
        return {
            "position_x": self.position_x,
            "position_y": self.position_y,
            "speed": self.speed,
            "heading": self.heading,
            "acceleration": self.acceleration,
            "mass": self.mass,
            "vclass": self.vclass.value,
            "length": self.length,
            "width": self.width,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "VehicleState":
        """Create VehicleState from dictionary."""
        return cls(
            position_x=float(data["position_x"]),
            position_y=float(data["position_y"]),
            speed=float(data.get("speed", 0.0)),
            heading=float(data.get("heading", 0.0)),
            acceleration=float(data.get("acceleration", 0.0)),
            mass=float(data["mass"]),
            vclass=VehicleClass(data.get("vclass", VehicleClass.LIGHT.value)),
            length=float(data["length"]),
            width=float(data["width"]),
        )


@dataclass(frozen=True)
class FieldForce(BaseModel):
    """Planar field vector acting on a receiving vehicle."""

    fx: float
    fy: float
    magnitude: float

    def to_dict(self) -> dict[str, Any]:
        return {"fx": self.fx, "fy": self.fy, "magnitude": self.magnitude}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "FieldForce":
        return cls(
            fx=float(data["fx"]), fy=float(data["fy"]), magnitude=float(data["magnitude"])
        )


@dataclass(frozen=True)
class HybridAction(BaseModel):
    """One discrete branch plus longitudinal and lateral accelerations."""

    branch: Branch
    a_vertical: float
    a_lateral: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "branch": self.branch.label,
            "a_vertical": self.a_vertical,
            "a_lateral": self.a_lateral,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "HybridAction":
        labels = {b.label: b for b in Branch}
        branch = data["branch"]
        return cls(
            branch=labels[branch] if isinstance(branch, str) else Branch(int(branch)),
            a_vertical=float(data["a_vertical"]),
            a_lateral=float(data["a_lateral"]),
        )


@dataclass(frozen=True)
class ObservationScales:
    """Divisors used to bring observation entries to order one."""

    distance: float = 50.0
    speed: float = 120.0 / 3.6
    acceleration: float = 3.0
    position: float = 1.75


@dataclass
class Observation(BaseModel):
    """Physical-unit state of the ego and its six surrounding slots.

    Each SV block is (dx, dy, dvx, dvy, yaw, present). The OV block is
    (v_long, v_lat, accel, lateral offset from lane centre, yaw,
    left lane exists, right lane exists).
    """

    sv_blocks: np.ndarray = field(
        default_factory=lambda: np.zeros((OBS_SLOTS, SV_BLOCK_SIZE))
    )
    ov_block: np.ndarray = field(default_factory=lambda: np.zeros(OV_BLOCK_SIZE))

    def __post_init__(self) -> None:
        self.sv_blocks = np.asarray(self.sv_blocks, dtype=np.float64)
        self.ov_block = np.asarray(self.ov_block, dtype=np.float64)
        if self.sv_blocks.shape != (OBS_SLOTS, SV_BLOCK_SIZE):
            raise ValueError(f"sv_blocks must be 6x6, got {self.sv_blocks.shape}")
        if self.ov_block.shape != (OV_BLOCK_SIZE,):
            raise ValueError(f"ov_block must have 7 entries, got {self.ov_block.shape}")

    def flat(self) -> np.ndarray:
        """Raw 43-vector in physical units."""
        return np.concatenate([self.sv_blocks.ravel(), self.ov_block])

    def to_array(self, scales: ObservationScales) -> np.ndarray:
        """Normalized 43-vector fed to the networks."""
        sv = self.sv_blocks.copy()
        sv[:, 0:2] /= scales.distance
        sv[:, 2:4] /= scales.speed
        ov = self.ov_block.copy()
        ov[0:2] /= scales.speed
        ov[2] /= scales.acceleration
        ov[3] /= scales.position
        return np.concatenate([sv.ravel(), ov])

    def to_dict(self) -> dict[str, Any]:
        return {
            "sv_blocks": self.sv_blocks.tolist(),
            "ov_block": self.ov_block.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Observation":
        return cls(
            sv_blocks=np.asarray(data["sv_blocks"], dtype=np.float64),
            ov_block=np.asarray(data["ov_block"], dtype=np.float64),
        )


@dataclass(frozen=True)
class RewardBreakdown(BaseModel):
    """Signed, weighted reward terms of one step.

    ``total`` is the plain sum of the five stored terms.
    """

    r_risk: float
    r_vertical: float
    r_position: float
    r_limit: float
    r_collision: float
    total: float
    speeding_flag: int
    risk_norm: float = 0.0
    speed_norm: float = 0.0
    position_norm: float = 0.0
    adr: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "r_risk": self.r_risk,
            "r_vertical": self.r_vertical,
            "r_position": self.r_position,
            "r_limit": self.r_limit,
            "r_collision": self.r_collision,
            "total": self.total,
            "speeding_flag": self.speeding_flag,
            "risk_norm": self.risk_norm,
            "speed_norm": self.speed_norm,
            "position_norm": self.position_norm,
            "adr": self.adr,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RewardBreakdown":
        return cls(**{key: data[key] for key in cls.__dataclass_fields__ if key in data})


@dataclass
class StepEvents(BaseModel):
    """Events emitted by one simulation tick."""

    collisions: list[tuple[int, int]] = field(default_factory=list)
    despawned: list[int] = field(default_factory=list)
    spawned: list[int] = field(default_factory=list)
    lane_changes_completed: list[int] = field(default_factory=list)
    off_road: list[int] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "collisions": [list(pair) for pair in self.collisions],
            "despawned": list(self.despawned),
            "spawned": list(self.spawned),
            "lane_changes_completed": list(self.lane_changes_completed),
            "off_road": list(self.off_road),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "StepEvents":
        return cls(
            collisions=[tuple(pair) for pair in data.get("collisions", [])],
            despawned=list(data.get("despawned", [])),
            spawned=list(data.get("spawned", [])),
            lane_changes_completed=list(data.get("lane_changes_completed", [])),
            off_road=list(data.get("off_road", [])),
        )


@dataclass(frozen=True)
class TrajectoryRecord(BaseModel):
    """One vehicle in one frame of a trajectory log."""

    frame: int
    vehicle_id: int
    x: float
    y: float
    v_x: float
    v_y: float
    a_x: float
    a_y: float
    lane: int
    vclass: VehicleClass
    mass: float
    length: float
    width: float
    mass_imputed: bool = False

    def to_state(self) -> VehicleState:
        """Rebuild the VehicleState the record describes."""
        speed = math.hypot(self.v_x, self.v_y)
        heading = math.atan2(self.v_y, self.v_x) if speed > 0 else 0.0
        acceleration = self.a_x * math.cos(heading) + self.a_y * math.sin(heading)
        return VehicleState(
            position_x=self.x,
            position_y=self.y,
            speed=speed,
            heading=heading,
            acceleration=acceleration,
            mass=self.mass,
            vclass=self.vclass,
            length=self.length,
            width=self.width,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "frame": self.frame,
            "vehicle_id": self.vehicle_id,
            "x": self.x,
            "y": self.y,
            "v_x": self.v_x,
            "v_y": self.v_y,
            "a_x": self.a_x,
            "a_y": self.a_y,
            "lane": self.lane,
            "vclass": self.vclass.value,
            "mass": self.mass,
            "length": self.length,
            "width": self.width,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrajectoryRecord":
        return cls(
            frame=int(data["frame"]),
            vehicle_id=int(data["vehicle_id"]),
            x=float(data["x"]),
            y=float(data["y"]),
            v_x=float(data["v_x"]),
            v_y=float(data["v_y"]),
            a_x=float(data["a_x"]),
            a_y=float(data["a_y"]),
            lane=int(data["lane"]),
            vclass=VehicleClass(data["vclass"]),
            mass=float(data["mass"]),
            length=float(data["length"]),
            width=float(data["width"]),
            mass_imputed=bool(data.get("mass_imputed", False)),
        )


@dataclass
class EpisodeLog(BaseModel):
    """Everything a report needs about one episode of one subject.

    Attributes:
        subject_id: Vehicle whose safety is being assessed.
        frame_rate: Frames per second of ``records``.
        records: Per-frame records of every vehicle.
        road_width: Carriageway width; when set, the subject leaving it
            counts as a collision.
        complete: False while the episode is still running.
    """

    subject_id: int
    frame_rate: float
    records: list[TrajectoryRecord] = field(default_factory=list)
    road_width: Optional[float] = None
    complete: bool = True

    def to_dict(self) -> dict[str, Any]:
        return {
            "subject_id": self.subject_id,
            "frame_rate": self.frame_rate,
            "records": [record.to_dict() for record in self.records],
            "road_width": self.road_width,
            "complete": self.complete,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EpisodeLog":
        return cls(
            subject_id=int(data["subject_id"]),
            frame_rate=float(data["frame_rate"]),
            records=[TrajectoryRecord.from_dict(r) for r in data.get("records", [])],
            road_width=data.get("road_width"),
            complete=bool(data.get("complete", True)),
        )


@dataclass(frozen=True)
class ConflictEvent(BaseModel):
    """A maximal run of conflict-flagged frames for one vehicle pair."""

    time: float
    pair: tuple[int, int]
    trigger: frozenset[str]
    heavy_involved: bool
    pce: float
    end_time: float = 0.0
    steps: int = 1
    other_class: VehicleClass = VehicleClass.LIGHT

    def __post_init__(self) -> None:
        if not self.trigger:
            raise ValueError("conflict trigger set cannot be empty")
        if self.pce < 0:
            raise ValueError(f"pce must be >= 0, got {self.pce}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "time": self.time,
            "end_time": self.end_time,
            "subject_id": self.pair[0],
            "other_id": self.pair[1],
            "trigger": "|".join(sorted(self.trigger)),
            "heavy_involved": self.heavy_involved,
            "other_class": self.other_class.value,
            "steps": self.steps,
            "pce_joules": self.pce,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ConflictEvent":
        return cls(
            time=float(data["time"]),
            end_time=float(data.get("end_time", data["time"])),
            pair=(int(data["subject_id"]), int(data["other_id"])),
            trigger=frozenset(str(data["trigger"]).split("|")),
            heavy_involved=bool(data["heavy_involved"]),
            other_class=VehicleClass(data.get("other_class", "light")),
            steps=int(data.get("steps", 1)),
            pce=float(data["pce_joules"]),
        )


@dataclass(frozen=True)
class EpisodeReport(BaseModel):
    """Aggregate safety and efficiency figures of one episode."""

    avg_speed: float
    lane_changes: int
    collisions: int
    conflicts: int
    heavy_in_conflicts: int
    light_in_conflicts: int
    pcec: float
    mean_adr: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "avg_speed": self.avg_speed,
            "lane_changes": self.lane_changes,
            "collisions": self.collisions,
            "conflicts": self.conflicts,
            "heavy_in_conflicts": self.heavy_in_conflicts,
            "light_in_conflicts": self.light_in_conflicts,
            "pcec_joules": self.pcec,
            "mean_adr": self.mean_adr,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EpisodeReport":
        return cls(
            avg_speed=float(data["avg_speed"]),
            lane_changes=int(data["lane_changes"]),
            collisions=int(data["collisions"]),
            conflicts=int(data["conflicts"]),
            heavy_in_conflicts=int(data["heavy_in_conflicts"]),
            light_in_conflicts=int(data["light_in_conflicts"]),
            pcec=float(data["pcec_joules"]),
            mean_adr=float(data["mean_adr"]),
        )
