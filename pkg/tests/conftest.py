"""
Pytest fixtures and configuration for the riskdrive tests.

This module provides reusable fixtures for building vehicles, staged
two-vehicle episode logs, small run configurations and trajectory files.
"""

from collections.abc import Callable
from pathlib import Path

import pytest

from src.config import NetworkConfig, RunConfig, build_run_config, load_env
from src.models import EpisodeLog, TrajectoryRecord, VehicleClass, VehicleState

# Load environment variables at test startup
load_env()

VehicleFactory = Callable[..., VehicleState]


@pytest.fixture
def make_vehicle() -> VehicleFactory:
    """Factory for heading-0 vehicle states with light-car defaults."""

    def factory(
        x: float = 0.0,
        y: float = 0.0,
        speed: float = 20.0,
        acceleration: float = 0.0,
        mass: float = 1500.0,
        vclass: VehicleClass = VehicleClass.LIGHT,
        heading: float = 0.0,
        length: float = 4.5,
        width: float = 1.8,
    ) -> VehicleState:
        return VehicleState(
            position_x=x,
            position_y=y,
            speed=speed,
            heading=heading,
            acceleration=acceleration,
            mass=mass,
            vclass=vclass,
            length=length,
            width=width,
        )

    return factory


def closing_pair_log(
    frames: int = 10,
    gap: float = 12.0,
    follower_speed: float = 20.0,
    leader_speed: float = 12.0,
    frame_rate: float = 10.0,
    leader_class: VehicleClass = VehicleClass.LIGHT,
    leader_mass: float = 1500.0,
) -> EpisodeLog:
    """
    Subject 0 following vehicle 1 in lane 0 with a constant bumper gap.

    Positions are held fixed so the gap and the closing speed stay the same
    in every frame, which keeps the measures constant along the log.
    """
    records = []
    length = 4.5
    for frame in range(frames):
        records.append(
            TrajectoryRecord(
                frame=frame,
                vehicle_id=0,
                x=100.0,
                y=1.75,
                v_x=follower_speed,
                v_y=0.0,
                a_x=0.0,
                a_y=0.0,
                lane=0,
                vclass=VehicleClass.LIGHT,
                mass=1500.0,
                length=length,
                width=1.8,
            )
        )
        records.append(
            TrajectoryRecord(
                frame=frame,
                vehicle_id=1,
                x=100.0 + length + gap,
                y=1.75,
                v_x=leader_speed,
                v_y=0.0,
                a_x=0.0,
                a_y=0.0,
                lane=0,
                vclass=leader_class,
                mass=leader_mass,
                length=length,
                width=1.8,
            )
        )
    return EpisodeLog(subject_id=0, frame_rate=frame_rate, records=records, complete=True)


@pytest.fixture
def closing_log() -> EpisodeLog:
    """Gap 12 m, closing 8 m/s in every frame: TTC 1.5 s, DRAC 2.67 m/s^2."""
    return closing_pair_log()


@pytest.fixture
def tiny_network() -> NetworkConfig:
    """Small layers with the full 43-wide observation."""
    return NetworkConfig(dense1=8, dense2=8, lstm=4, attention_dim=4, dense_out=4, window=3)


@pytest.fixture
def fast_config(tiny_network: NetworkConfig) -> RunConfig:
    """Toy scenario with a short warm-up, horizon and training budget."""
    base = RunConfig.preset("toy")
    cfg = build_run_config(
        {
            "highway": {"warmup": 5.0},
            "env": {"horizon_steps": 20},
            "trainer": {
                "horizon": 16,
                "minibatch": 8,
                "epochs": 1,
                "iterations": 2,
                "checkpoint_every": 1,
            },
            "evaluation": {"episodes": 2},
        },
        base=base,
    )
    return cfg.model_copy(update={"network": tiny_network})


@pytest.fixture
def trajectory_csv(tmp_path: Path) -> Path:
    """Three-row trajectory file with a frame-rate header."""
    path = tmp_path / "trajectory.csv"
    path.write_text(
        "# frame_rate=10\n"
        "frame,vehicle_id,x,y,v_x,v_y,a_x,a_y,lane,vclass,mass,length,width\n"
        "0,0,100.5,1.75,20,0,0,0,0,light,1500,4.5,1.8\n"
        "0,1,117,1.75,12,0,0,0,0,heavy,20000,12,2.5\n"
        "1,0,102.5,1.75,20,0,0.25,0,0,light,1500,4.5,1.8\n",
        encoding="utf-8",
    )
    return path
