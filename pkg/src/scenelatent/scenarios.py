"""Scenario data model: ego-relative trajectories, frame resampling, file I/O.

Coordinate convention: the ego vehicle sits at the origin (0, 0) and faces the
+y axis for the whole scene. x is the lateral offset in meters (positive =
left of ego), y the longitudinal offset (positive = ahead of ego). Positions
are ego-relative; velocities are relative to the ground.

All types are immutable after construction, so they are safe to share between
worker processes or threads.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_DURATION = 5.0


class ClassLabel(Enum):
    """Maneuver classes assigned by the auto-labeler.

    The numeric order (overtakes < leading < being overtaken) is the
    tie-break order used by majority voting.
    """

    EGO_OVERTAKES = "EgoOvertakes"
    LEADING_VEHICLE_AHEAD = "LeadingVehicleAhead"
    EGO_BEING_OVERTAKEN = "EgoBeingOvertaken"

    @property
    def index(self) -> int:
        return _LABEL_INDEX[self]


_LABEL_INDEX = {
    ClassLabel.EGO_OVERTAKES: 1,
    ClassLabel.LEADING_VEHICLE_AHEAD: 2,
    ClassLabel.EGO_BEING_OVERTAKEN: 3,
}


@dataclass(frozen=True)
class TrajectorySample:
    """One observation of a traffic participant.

    t : float
        Timestamp in seconds, relative to scenario start. Non-negative.
    x, y : float
        Ego-relative position in meters (lateral, longitudinal).
    v_lon : float
        Longitudinal ground velocity in m/s.
    v_lat : float or None
        Optional lateral ground velocity in m/s.
    """

    t: float
    x: float
    y: float
    v_lon: float
    v_lat: float | None = None

    def is_finite(self) -> bool:
        values = [self.t, self.x, self.y, self.v_lon]
        if self.v_lat is not None:
            values.append(self.v_lat)
        return all(math.isfinite(v) for v in values)


@dataclass(frozen=True)
class Trajectory:
    """Movement of one participant as a time-ordered sample list."""

    participant_id: str
    samples: tuple[TrajectorySample, ...]

    def __init__(self, participant_id: str, samples: Iterable[TrajectorySample]):
        object.__setattr__(self, "participant_id", participant_id)
        object.__setattr__(self, "samples", tuple(samples))

    @property
    def t_start(self) -> float:
        return self.samples[0].t

    @property
    def t_end(self) -> float:
        return self.samples[-1].t

    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.samples], dtype=float)


@dataclass(frozen=True)
class Scenario:
    """A fixed-duration window of ego-relative participant trajectories."""

    scenario_id: str
    duration: float
    trajectories: tuple[Trajectory, ...]
    label: ClassLabel | None = None

    def __init__(
        self,
        scenario_id: str,
        duration: float,
        trajectories: Iterable[Trajectory],
        label: ClassLabel | None = None,
    ):
        object.__setattr__(self, "scenario_id", scenario_id)
        object.__setattr__(self, "duration", float(duration))
        object.__setattr__(self, "trajectories", tuple(trajectories))
        object.__setattr__(self, "label", label)

    def with_label(self, label: ClassLabel | None) -> "Scenario":
        return Scenario(self.scenario_id, self.duration, self.trajectories, label)


@dataclass(frozen=True)
class FrameSet:
    """The unordered participant set at one resampled time frame.

    elements holds up to ``n_max`` feature rows (x, y, v_lon); rows whose mask
    flag is False are padding and contain all zeros. Validity is carried by
    the mask, never by the padding value.
    """

    frame_index: int
    elements: np.ndarray  # (n_max, 3) float64
    mask: np.ndarray  # (n_max,) bool

    def __post_init__(self):
        object.__setattr__(self, "elements", np.asarray(self.elements, dtype=float))
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))
        self.elements.setflags(write=False)
        self.mask.setflags(write=False)

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of validate_scenario: a list of human-readable violations."""

    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_scenario(scenario: Scenario) -> ValidationReport:
    """Check every scenario/trajectory invariant; never raises.

    Returns an empty report iff the scenario is valid.
    """
    problems: list[str] = []
    if not scenario.trajectories:
        problems.append("no participants: scenario must contain at least one trajectory")
    if not math.isfinite(scenario.duration) or scenario.duration <= 0:
        problems.append(f"duration must be positive and finite, got {scenario.duration}")
    for traj in scenario.trajectories:
        pid = traj.participant_id
        if not traj.samples:
            problems.append(f"trajectory {pid!r} is empty")
            continue
        prev_t = None
        for k, s in enumerate(traj.samples):
            if not s.is_finite():
                problems.append(f"trajectory {pid!r} sample {k} has non-finite values")
            if s.t < 0 or s.t > scenario.duration:
                problems.append(
                    f"trajectory {pid!r} sample {k} timestamp {s.t} outside [0, {scenario.duration}]"
                )
            if prev_t is not None and s.t <= prev_t:
                problems.append(
                    f"trajectory {pid!r} has non-increasing timestamps at sample {k}"
                    f" ({prev_t} -> {s.t})"
                )
            prev_t = s.t
    return ValidationReport(tuple(problems))


def resample_to_frames(
    scenario: Scenario,
    frame_count: int,
    rate_hz: float,
    n_max: int = 3,
) -> list[FrameSet]:
    """Resample a scenario onto a fixed frame clock.

    Frame k is taken at time k / rate_hz. Participant positions and
    velocities are linearly interpolated between the surrounding samples; a
    participant is absent (mask False) at frames outside its own time span.
    If more than ``n_max`` participants are present at a frame, only the
    n_max closest to the ego are kept, ties broken by participant_id.
    """
    if frame_count < 1:
        raise ValueError(f"frame_count must be >= 1, got {frame_count}")
    if rate_hz <= 0:
        raise ValueError(f"rate_hz must be positive, got {rate_hz}")
    report = validate_scenario(scenario)
    if not report.ok:
        raise ValueError(f"invalid scenario {scenario.scenario_id!r}: {report.violations}")
    last_time = (frame_count - 1) / rate_hz
    if last_time > scenario.duration:
        raise ValueError(
            f"window exceeds duration: frame at t={last_time} past duration {scenario.duration}"
        )

    frame_times = np.arange(frame_count) / rate_hz
    # Per-trajectory interpolants, evaluated once for all frame times.
    per_frame: list[list[tuple[float, str, float, float, float]]] = [
        [] for _ in range(frame_count)
    ]
    for traj in scenario.trajectories:
        t = traj.times()
        x = np.array([s.x for s in traj.samples])
        y = np.array([s.y for s in traj.samples])
        v = np.array([s.v_lon for s in traj.samples])
        covered = (frame_times >= t[0]) & (frame_times <= t[-1])
        if not covered.any():
            continue
        ft = frame_times[covered]
        xi = np.interp(ft, t, x)
        yi = np.interp(ft, t, y)
        vi = np.interp(ft, t, v)
        dist = np.hypot(xi, yi)
        for k, d, px, py, pv in zip(np.nonzero(covered)[0], dist, xi, yi, vi):
            per_frame[int(k)].append((float(d), traj.participant_id, float(px), float(py), float(pv)))

    frames = []
    for k in range(frame_count):
        present = sorted(per_frame[k], key=lambda e: (e[0], e[1]))[:n_max]
        elements = np.zeros((n_max, 3), dtype=float)
        mask = np.zeros(n_max, dtype=bool)
        for slot, (_, _, px, py, pv) in enumerate(present):
            elements[slot] = (px, py, pv)
            mask[slot] = True
        frames.append(FrameSet(frame_index=k, elements=elements, mask=mask))
    return frames


class ScenarioFormatError(ValueError):
    """Raised for malformed scenario files; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def _scenario_to_record(scenario: Scenario) -> dict:
    record: dict = {
        "scenario_id": scenario.scenario_id,
        "duration": scenario.duration,
        "trajectories": [
            {
                "participant_id": traj.participant_id,
                "samples": [
                    [s.t, s.x, s.y, s.v_lon] if s.v_lat is None
                    else [s.t, s.x, s.y, s.v_lon, s.v_lat]
                    for s in traj.samples
                ],
            }
            for traj in scenario.trajectories
        ],
    }
    if scenario.label is not None:
        record["label"] = scenario.label.value
    return record


def _record_to_scenario(record: dict, line: int) -> Scenario:
    if not isinstance(record, dict):
        raise ScenarioFormatError("record is not an object", line)
    for key in ("scenario_id", "duration", "trajectories"):
        if key not in record:
            raise ScenarioFormatError(f"record missing {key!r}", line)
    trajectories = []
    for traj in record["trajectories"]:
        if "participant_id" not in traj or "samples" not in traj:
            raise ScenarioFormatError(
                "trajectory missing 'participant_id' or 'samples'", line
            )
        samples = []
        for row in traj["samples"]:
            if len(row) not in (4, 5):
                raise ScenarioFormatError(
                    f"sample row must have 4 or 5 numbers, got {len(row)}", line
                )
            samples.append(TrajectorySample(*[float(v) for v in row]))
        trajectories.append(Trajectory(str(traj["participant_id"]), samples))
    label = None
    if "label" in record and record["label"] is not None:
        try:
            label = ClassLabel(record["label"])
        except ValueError:
            raise ScenarioFormatError(f"unknown label {record['label']!r}", line) from None
    return Scenario(
        scenario_id=str(record["scenario_id"]),
        duration=float(record["duration"]),
        trajectories=trajectories,
        label=label,
    )


def write_scenarios(path: str | Path, scenarios: Iterable[Scenario]) -> None:
    """Write scenarios as newline-delimited JSON, one record per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for scenario in scenarios:
            fh.write(json.dumps(_scenario_to_record(scenario), separators=(",", ":")))
            fh.write("\n")


def read_scenarios(path: str | Path) -> list[Scenario]:
    """Read a newline-delimited scenario file.

    Raises ScenarioFormatError with the line number for malformed records and
    for duplicate scenario ids within one file.
    """
    scenarios: list[Scenario] = []
    seen: set[str] = set()
    with Path(path).open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ScenarioFormatError(f"invalid JSON: {exc.msg}", line_no) from None
            scenario = _record_to_scenario(record, line_no)
            if scenario.scenario_id in seen:
                raise ScenarioFormatError(
                    f"duplicate scenario_id {scenario.scenario_id!r}", line_no
                )
            seen.add(scenario.scenario_id)
            scenarios.append(scenario)
    return scenarios
