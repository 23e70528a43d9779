"""
Trajectory CSV ingestion and export, offline replay, and result tables.

The trajectory file is a header comment block of ``# key=value`` lines
(``frame_rate``, optionally ``road_width``) followed by a CSV with the
columns ``frame,vehicle_id,x,y,v_x,v_y,a_x,a_y,lane,vclass,mass,length,width``.
The ``mass`` column may be omitted, in which case masses are imputed from
the vehicle class. Floats are written with 17 significant digits so that a
simulated episode replays bit-for-bit.

Parsing is strict and locale-independent: a decimal point only, no
thousands separators, no missing values.
"""

import logging
import math
import re
from collections import defaultdict
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import pandas as pd

from .config import HighwayConfig, RiskFieldParams, ThresholdConfig
from .errors import IncompleteLog, MissingColumn, ParseError, SubjectNotFound
from .models import (
    ConflictEvent,
    EpisodeLog,
    EpisodeReport,
    TrajectoryRecord,
    VehicleClass,
)
from .safetymetrics import analyze_episode

logger = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = [
    "frame",
    "vehicle_id",
    "x",
    "y",
    "v_x",
    "v_y",
    "a_x",
    "a_y",
    "lane",
    "vclass",
    "mass",
    "length",
    "width",
]
REPORT_COLUMNS = [
    "episode",
    "avg_speed",
    "lane_changes",
    "collisions",
    "conflicts",
    "heavy_in_conflicts",
    "light_in_conflicts",
    "pcec_joules",
    "mean_adr",
]
EVENT_COLUMNS = [
    "episode",
    "time",
    "end_time",
    "subject_id",
    "other_id",
    "trigger",
    "heavy_involved",
    "other_class",
    "steps",
    "pce_joules",
]
LEARNING_CURVE_COLUMNS = [
    "iteration",
    "mean_return",
    "mean_adr",
    "loss_total",
    "loss_value",
    "entropy_d",
    "entropy_c",
    "lr",
]
DEFAULT_FRAME_RATE = 25.0
FLOAT_FORMAT = "%.17g"

_DECIMAL = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$")
_INTEGER = re.compile(r"^[+-]?\d+$")

PathLike = Union[Path, str]


def default_masses(highway: Optional[HighwayConfig] = None) -> dict[VehicleClass, float]:
    """Imputed mass per class: the midpoint of the configured mass range."""
    highway = highway or HighwayConfig()
    return {
        VehicleClass.LIGHT: 0.5 * (highway.light_mass[0] + highway.light_mass[1]),
        VehicleClass.HEAVY: 0.5 * (highway.heavy_mass[0] + highway.heavy_mass[1]),
    }


def _read_header_block(path: Path) -> tuple[dict[str, str], int]:
    """Leading ``# key=value`` lines and how many lines they take."""
    meta: dict[str, str] = {}
    count = 0
    with path.open("r", encoding="utf-8") as handle:
        for line in handle:
            if not line.startswith("#"):
                break
            count += 1
            key, sep, value = line[1:].strip().partition("=")
            if sep:
                meta[key.strip()] = value.strip()
    return meta, count


def _parse_float(text: str, line: int, column: str, positive: bool = False) -> float:
    if not _DECIMAL.match(text):
        raise ParseError(f"'{text}' is not a plain decimal number", line, column)
    value = float(text)
    if not math.isfinite(value):
        raise ParseError(f"'{text}' is not finite", line, column)
    if positive and value <= 0:
        raise ParseError(f"must be > 0, got {text}", line, column)
    return value


def _parse_int(text: str, line: int, column: str, minimum: Optional[int] = None) -> int:
    if not _INTEGER.match(text):
        raise ParseError(f"'{text}' is not an integer", line, column)
    value = int(text)
    if minimum is not None and value < minimum:
        raise ParseError(f"must be >= {minimum}, got {text}", line, column)
    return value


def _wide_row_error(path: Path, header_line: int) -> ParseError:
    """ParseError for the first data row with more fields than the header."""
    with path.open("r", encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    width = len(lines[header_line - 1].split(","))
    for number, text in enumerate(lines[header_line:], start=header_line + 1):
        count = len(text.split(","))
        if count > width:
            return ParseError(
                f"expected {width} fields, saw {count}", number, f"field {width + 1}"
            )
    return ParseError("row has more fields than the header", header_line, "header")


def parse_trajectory_csv(
    path: PathLike, highway: Optional[HighwayConfig] = None
) -> list[TrajectoryRecord]:
    """
    Strictly parse a trajectory CSV.

    Args:
        path: File to read.
        highway: Source of the imputed class masses.

    Returns:
        list[TrajectoryRecord]: Records in file order; ``mass_imputed`` is
        set when the file has no ``mass`` column.

    Raises:
        MissingColumn: If a required column is absent.
        ParseError: For unknown columns or invalid values, with the 1-based
            line number and column name.

    Example:
        >>> records = parse_trajectory_csv("runs/episode_0.csv")
        >>> records[0].vclass
        <VehicleClass.LIGHT: 'light'>
    """
    path = Path(path)
    _, header_offset = _read_header_block(path)
    header_line = header_offset + 1
    try:
        frame = pd.read_csv(
            path,
            skiprows=header_offset,
            dtype=str,
            keep_default_na=False,
            skip_blank_lines=False,
            skipinitialspace=False,
        )
    except pd.errors.EmptyDataError:
        raise MissingColumn(f"{path}: no header row") from None
    except pd.errors.ParserError:
        raise _wide_row_error(path, header_line) from None
    if len(frame) and not isinstance(frame.index, pd.RangeIndex):
        # one surplus field on the first data row turns into an index
        raise _wide_row_error(path, header_line)
    columns = [str(c) for c in frame.columns]
    for column in columns:
        if column not in TRAJECTORY_COLUMNS:
            raise ParseError("unknown column", header_line, column)
    for column in TRAJECTORY_COLUMNS:
        if column not in columns and column != "mass":
            raise MissingColumn(f"{path}: required column '{column}' is missing")
    has_mass = "mass" in columns
    masses = default_masses(highway)

    records: list[TrajectoryRecord] = []
    last_frame: dict[int, int] = {}
    for offset, row in enumerate(frame.itertuples(index=False, name=None)):
        line = header_line + 1 + offset
        values = dict(zip(columns, row, strict=True))
        frame_index = _parse_int(values["frame"], line, "frame", minimum=0)
        vehicle_id = _parse_int(values["vehicle_id"], line, "vehicle_id")
        floats = {
            name: _parse_float(values[name], line, name)
            for name in ("x", "y", "v_x", "v_y", "a_x", "a_y")
        }
        lane = _parse_int(values["lane"], line, "lane", minimum=0)
        try:
            vclass = VehicleClass(values["vclass"])
        except ValueError:
            raise ParseError(
                f"'{values['vclass']}' is not one of light, heavy", line, "vclass"
            ) from None
        mass = (
            _parse_float(values["mass"], line, "mass", positive=True)
            if has_mass
            else masses[vclass]
        )
        length = _parse_float(values["length"], line, "length", positive=True)
        width = _parse_float(values["width"], line, "width", positive=True)
        if frame_index < last_frame.get(vehicle_id, frame_index):
            raise ParseError(
                f"frames of vehicle {vehicle_id} must be non-decreasing", line, "frame"
            )
        last_frame[vehicle_id] = frame_index
        records.append(
            TrajectoryRecord(
                frame=frame_index,
                vehicle_id=vehicle_id,
                lane=lane,
                vclass=vclass,
                mass=mass,
                length=length,
                width=width,
                mass_imputed=not has_mass,
                **floats,
            )
        )
    logger.info(
        "Trajectory file parsed",
        extra={"path": str(path), "records": len(records), "mass_imputed": not has_mass},
    )
    return records


def read_frame_rate(path: PathLike) -> float:
    """Frame rate declared in the header block, 25 Hz when absent."""
    meta, _ = _read_header_block(Path(path))
    if "frame_rate" not in meta:
        return DEFAULT_FRAME_RATE
    return _parse_float(meta["frame_rate"], 1, "frame_rate", positive=True)


def read_road_width(path: PathLike) -> Optional[float]:
    """Road width declared in the header block, if any."""
    meta, _ = _read_header_block(Path(path))
    if "road_width" not in meta:
        return None
    return _parse_float(meta["road_width"], 1, "road_width", positive=True)


def read_episode_log(path: PathLike, subject_id: int) -> EpisodeLog:
    """Parse a trajectory file into a complete EpisodeLog for ``subject_id``."""
    return EpisodeLog(
        subject_id=subject_id,
        frame_rate=read_frame_rate(path),
        records=parse_trajectory_csv(path),
        road_width=read_road_width(path),
        complete=True,
    )


def _records_frame(records: Iterable[TrajectoryRecord]) -> pd.DataFrame:
    return pd.DataFrame([r.to_dict() for r in records], columns=TRAJECTORY_COLUMNS)


def write_trajectory_csv(log: EpisodeLog, path: PathLike) -> Path:
    """
    Export an episode log; the header block carries the frame rate and,
    when known, the road width.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        handle.write(f"# frame_rate={FLOAT_FORMAT % log.frame_rate}\n")
        if log.road_width is not None:
            handle.write(f"# road_width={FLOAT_FORMAT % log.road_width}\n")
        _records_frame(log.records).to_csv(
            handle, index=False, float_format=FLOAT_FORMAT, lineterminator="\n"
        )
    logger.info("Trajectory file written", extra={"path": str(path), "records": len(log.records)})
    return path


def resample_records(
    records: Sequence[TrajectoryRecord], frame_rate: float, dt: float
) -> list[TrajectoryRecord]:
    """
    Linearly interpolate every vehicle's track onto a grid of step ``dt``.

    Lane and class take the value of the latest source frame at or before
    each target time. The result is ordered by frame, then vehicle id.
    """
    tracks: dict[int, list[TrajectoryRecord]] = defaultdict(list)
    for record in records:
        tracks[record.vehicle_id].append(record)
    resampled: list[TrajectoryRecord] = []
    for vehicle_id, track in tracks.items():
        track.sort(key=lambda r: r.frame)
        times = np.array([r.frame / frame_rate for r in track])
        first = math.ceil(times[0] / dt - 1e-9)
        last = math.floor(times[-1] / dt + 1e-9)
        for k in range(first, last + 1):
            t = k * dt
            source = track[max(int(np.searchsorted(times, t + 1e-12, side="right")) - 1, 0)]
            values = {
                name: float(np.interp(t, times, [getattr(r, name) for r in track]))
                for name in ("x", "y", "v_x", "v_y", "a_x", "a_y")
            }
            resampled.append(
                TrajectoryRecord(
                    frame=k,
                    vehicle_id=vehicle_id,
                    lane=source.lane,
                    vclass=source.vclass,
                    mass=source.mass,
                    length=source.length,
                    width=source.width,
                    mass_imputed=source.mass_imputed,
                    **values,
                )
            )
    resampled.sort(key=lambda r: (r.frame, r.vehicle_id))
    return resampled


def replay_evaluate(
    records: Sequence[TrajectoryRecord],
    params: RiskFieldParams,
    thresholds: ThresholdConfig,
    subject_ids: Sequence[int],
    frame_rate: float = DEFAULT_FRAME_RATE,
    dt: Optional[float] = None,
    road_width: Optional[float] = None,
    adr_range: float = 50.0,
    perception_range: float = 50.0,
) -> dict[int, tuple[EpisodeReport, list[ConflictEvent]]]:
    """
    Safety metrics of logged subjects against their logged neighbours.

    Args:
        records: Parsed trajectory records.
        params: Risk-field coefficients.
        thresholds: Conflict thresholds.
        subject_ids: Vehicles to assess.
        frame_rate: Frame rate of ``records``.
        dt: Simulator step to resample to; no resampling when omitted or
            when it already equals one frame.
        road_width: Carriageway width for off-road detection.

    Returns:
        dict: Subject id to (EpisodeReport, conflict events).

    Raises:
        IncompleteLog: If the records span fewer than two frames.
        SubjectNotFound: If a subject has no records.
    """
    if len({r.frame for r in records}) < 2:
        raise IncompleteLog("replay needs records spanning at least two frames")
    present = {r.vehicle_id for r in records}
    for subject_id in subject_ids:
        if subject_id not in present:
            raise SubjectNotFound(f"vehicle {subject_id} does not appear in the records")

    if dt is not None and abs(frame_rate * dt - 1.0) > 1e-9:
        records = resample_records(records, frame_rate, dt)
        frame_rate = 1.0 / dt

    results = {}
    for subject_id in subject_ids:
        log = EpisodeLog(
            subject_id=subject_id,
            frame_rate=frame_rate,
            records=list(records),
            road_width=road_width,
            complete=True,
        )
        results[subject_id] = analyze_episode(
            log, params, thresholds, adr_range=adr_range, perception_range=perception_range
        )
    logger.info(
        "Replay evaluated", extra={"subjects": list(subject_ids), "records": len(records)}
    )
    return results


def _write_table(rows: list[dict[str, Any]], columns: list[str], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=columns).to_csv(
        path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n"
    )
    return path


def write_report_csv(reports: Sequence[EpisodeReport], path: PathLike) -> Path:
    """One row per episode, numbered from 0."""
    rows = [{"episode": i, **report.to_dict()} for i, report in enumerate(reports)]
    logger.info("Report written", extra={"path": str(path), "episodes": len(rows)})
    return _write_table(rows, REPORT_COLUMNS, path)


def write_events_csv(
    events: Sequence[tuple[int, ConflictEvent]], path: PathLike
) -> Path:
    """Conflict events tagged with their episode number."""
    rows = [{"episode": episode, **event.to_dict()} for episode, event in events]
    return _write_table(rows, EVENT_COLUMNS, path)


def write_learning_curve_csv(history: Sequence[Any], path: PathLike) -> Path:
    """Learning-curve rows (objects with ``to_dict``) in iteration order."""
    return _write_table([row.to_dict() for row in history], LEARNING_CURVE_COLUMNS, path)


def read_report_csv(path: PathLike) -> list[EpisodeReport]:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    return [EpisodeReport.from_dict(row) for row in frame.to_dict(orient="records")]
