"""
Weight-aware driving risk field.

A surrounding vehicle (SV, the emitter A) produces a kinetic field whose
strength grows with its mass and speed and decays with a speed-warped
pseudo-distance. The field force felt by an object vehicle (OV, the
receiver B) additionally scales with the receiver's mass and with the
relative motion of the pair. Summing the force magnitudes over all SVs
gives the anticipated driving risk (ADR) of the OV.

Angles between vehicles are clockwise-positive and lie in (-pi, pi];
a zero-length vector yields angle 0. All functions are pure.
"""

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .config import RiskFieldParams
from .errors import InvalidGrid, SingularPosition
from .models import FieldForce, VehicleClass, VehicleState

logger = logging.getLogger(__name__)

FIELD_GRID_COLUMNS = ["x", "y", "force"]


def _wrap_angle(angle: float) -> float:
    wrapped = math.remainder(angle, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


def clockwise_angle(u: tuple[float, float], v: tuple[float, float]) -> float:
    """
    Clockwise angle that rotates ``u`` onto ``v``.

    Args:
        u: Reference vector (x, y), y to the left.
        v: Target vector.

    Returns:
        float: Angle in (-pi, pi]; 0 if either vector has zero length.
    """
    if (u[0] == 0.0 and u[1] == 0.0) or (v[0] == 0.0 and v[1] == 0.0):
        return 0.0
    cross = u[0] * v[1] - u[1] * v[0]
    dot = u[0] * v[0] + u[1] * v[1]
    return _wrap_angle(-math.atan2(cross, dot))


def angles_between(sv: VehicleState, ov: VehicleState) -> tuple[float, float, float]:
    """
    Pair angles between an emitting SV and a receiving OV.

    Args:
        sv: Emitting vehicle.
        ov: Receiving vehicle.

    Returns:
        tuple: (theta, gamma, alpha) where theta is between the velocity
        directions, gamma between the acceleration directions and alpha
        between the lane axis and the SV-to-OV centre line.

    Example:
        >>> theta, gamma, alpha = angles_between(sv_at_origin, ov_at_10_10)
        >>> round(alpha, 6)
        -0.785398
    """
    theta = clockwise_angle((sv.v_x, sv.v_y), (ov.v_x, ov.v_y))
    gamma = clockwise_angle((sv.a_x, sv.a_y), (ov.a_x, ov.a_y))
    alpha = clockwise_angle(
        (1.0, 0.0), (ov.position_x - sv.position_x, ov.position_y - sv.position_y)
    )
    return theta, gamma, alpha


def _pseudo_vector(
    sv: VehicleState, ov: VehicleState, params: RiskFieldParams
) -> tuple[float, float]:
    warp = math.exp(params.exp_coeff * sv.speed)
    kx = (ov.position_x - sv.position_x) * params.tau / warp
    ky = (ov.position_y - sv.position_y) * params.tau
    return kx, ky


def pseudo_distance(
    sv: VehicleState, ov: VehicleState, params: RiskFieldParams
) -> float:
    """
    Speed-warped distance from the SV to the OV.

    The longitudinal separation is compressed by exp(c * v_sv) where c is
    ``params.exp_coeff``; both components are scaled by tau.

    Returns:
        float: Pseudo-distance, 0 when the positions coincide.
    """
    kx, ky = _pseudo_vector(sv, ov, params)
    return math.hypot(kx, ky)


def speed_term(speed: float, params: RiskFieldParams) -> float:
    """Fixed speed amplification 1.566e-14 * v^6.687 + 0.3345."""
    return params.speed_coeff * speed**params.speed_exp + params.speed_offset


def _class_coefficient(vehicle: VehicleState, params: RiskFieldParams) -> float:
    return params.t_heavy if vehicle.vclass == VehicleClass.HEAVY else params.t_light


def kinetic_field_strength(
    sv: VehicleState, ov: VehicleState, params: RiskFieldParams
) -> FieldForce:
    """
    Kinetic field strength the SV produces at the OV's position.

    Args:
        sv: Emitting vehicle.
        ov: Point of evaluation (only its position is used).
        params: Field coefficients.

    Returns:
        FieldForce: Vector along the pseudo-distance direction.

    Raises:
        SingularPosition: If the two positions coincide.
    """
    kx, ky = _pseudo_vector(sv, ov, params)
    distance = math.hypot(kx, ky)
    if distance == 0.0:
        raise SingularPosition(
            f"field undefined at the emitter's position ({sv.position_x}, {sv.position_y})"
        )
    _, _, alpha = angles_between(sv, ov)
    magnitude = (
        _class_coefficient(sv, params)
        * sv.mass
        * speed_term(sv.speed, params)
        * params.lambda_field
        * math.exp(-params.beta1 * sv.acceleration * math.cos(alpha))
        / distance
    )
    return FieldForce(
        fx=magnitude * kx / distance, fy=magnitude * ky / distance, magnitude=magnitude
    )


def field_force(
    sv: VehicleState, ov: VehicleState, params: RiskFieldParams
) -> FieldForce:
    """
    Force the SV's field exerts on the OV.

    The relative-motion exponent compares the OV's signed speed and
    acceleration, projected through theta and gamma, with the SV's own.

    Raises:
        SingularPosition: If the two positions coincide.
    """
    strength = kinetic_field_strength(sv, ov, params)
    theta, gamma, alpha = angles_between(sv, ov)
    speed = ov.speed if params.force_speed_from_ov else sv.speed
    relative = params.beta2 * (ov.speed * math.cos(theta) - sv.speed) + params.beta3 * (
        ov.acceleration * math.cos(gamma) - sv.acceleration
    )
    scale = (
        _class_coefficient(ov, params)
        * ov.mass
        * speed_term(speed, params)
        * math.exp(-relative * math.cos(alpha))
    )
    return FieldForce(
        fx=scale * strength.fx,
        fy=scale * strength.fy,
        magnitude=scale * strength.magnitude,
    )


def adr(
    ov: VehicleState, svs: list[VehicleState], params: RiskFieldParams
) -> float:
    """
    Anticipated driving risk of the OV: summed force magnitudes of all SVs.

    Raises:
        SingularPosition: If any SV sits at the OV's position.
    """
    total = 0.0
    for sv in svs:
        total += field_force(sv, ov, params).magnitude
    return total


@dataclass(frozen=True)
class FieldGrid:
    """Inclusive rectangular sampling grid in road coordinates."""

    x_start: float
    x_stop: float
    y_start: float
    y_stop: float
    step: float

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        """Sample coordinates along x and y."""
        if not self.step > 0:
            raise InvalidGrid(f"grid step must be > 0, got {self.step}")
        if self.x_stop < self.x_start or self.y_stop < self.y_start:
            raise InvalidGrid("grid ranges must be non-empty (stop >= start)")
        nx = int(math.floor((self.x_stop - self.x_start) / self.step + 1e-9)) + 1
        ny = int(math.floor((self.y_stop - self.y_start) / self.step + 1e-9)) + 1
        xs = self.x_start + self.step * np.arange(nx, dtype=np.float64)
        ys = self.y_start + self.step * np.arange(ny, dtype=np.float64)
        return xs, ys


def field_grid_export(
    sv: VehicleState,
    params: RiskFieldParams,
    grid: FieldGrid,
    ov: VehicleState,
) -> pd.DataFrame:
    """
    Sample |F| on a grid by placing the OV at every grid point.

    Args:
        sv: Emitting vehicle.
        params: Field coefficients.
        grid: Sampling grid.
        ov: OV template; its position is overwritten per cell.

    Returns:
        pd.DataFrame: Columns ``x, y, force``, x-major order. The SV's own
        cell holds ``inf``.

    Raises:
        InvalidGrid: For a non-positive step or an empty range.
    """
    xs, ys = grid.axes()
    rows: list[tuple[float, float, float]] = []
    for x in xs:
        for y in ys:
            placed = replace(ov, position_x=float(x), position_y=float(y))
            try:
                force = field_force(sv, placed, params).magnitude
            except SingularPosition:
                force = math.inf
            rows.append((float(x), float(y), force))
    logger.debug("Field grid sampled", extra={"nx": len(xs), "ny": len(ys)})
    return pd.DataFrame(rows, columns=FIELD_GRID_COLUMNS)


def write_field_grid_csv(grid: pd.DataFrame, path: Path | str) -> Path:
    """Write a field grid with full float precision; the singular cell is ``inf``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    grid.to_csv(path, index=False, float_format="%.17g", columns=FIELD_GRID_COLUMNS)
    logger.info("Field grid written", extra={"path": str(path), "cells": len(grid)})
    return path
