"""Synthetic labeled highway scenarios plus the rule-based maneuver labeler.

The generator emits minimal straight-road kinematics: lane-keeping constant
relative velocity with Gaussian positional jitter. Each labeled template is
built so the labeler below accepts it with the same class; random traffic is
written without a label.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .scenarios import (
    ClassLabel,
    Scenario,
    Trajectory,
    TrajectorySample,
    validate_scenario,
    write_scenarios,
)

# Sentinel for unlabeled background-traffic draws in class mixes.
RANDOM_TRAFFIC = "RandomTraffic"

# Mix entries follow this order.
MIX_ORDER = (
    ClassLabel.EGO_OVERTAKES,
    ClassLabel.LEADING_VEHICLE_AHEAD,
    ClassLabel.EGO_BEING_OVERTAKEN,
    RANDOM_TRAFFIC,
)

# Stream tags keep the per-scenario and per-dataset RNG sequences disjoint.
_SCENARIO_STREAM = 11
_CLASS_DRAW_STREAM = 23


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs of the scenario generator.

    class_mix are proportions over (EgoOvertakes, LeadingVehicleAhead,
    EgoBeingOvertaken, RandomTraffic); they must be non-negative and sum
    to 1. Speed ranges are relative to the ego except ego_speed_range.
    """

    rng_seed: int = 0
    class_mix: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    lane_width: float = 3.5
    noise_std: float = 0.15
    duration: float = 5.0
    sample_rate_hz: float = 5.0
    n_max: int = 3
    ego_speed_range: tuple[float, float] = (20.0, 35.0)
    overtake_speed_range: tuple[float, float] = (5.0, 10.0)
    leading_speed_range: tuple[float, float] = (-0.3, 0.3)
    random_speed_range: tuple[float, float] = (-8.0, 8.0)
    background_prob: float = 0.5

    def __post_init__(self):
        if len(self.class_mix) != 4:
            raise ValueError("class_mix needs 4 entries (3 classes + random traffic)")
        if any(p < 0 for p in self.class_mix):
            raise ValueError(f"class_mix entries must be non-negative: {self.class_mix}")
        if abs(sum(self.class_mix) - 1.0) > 1e-9:
            raise ValueError(f"class_mix must sum to 1, got {sum(self.class_mix)}")
        if self.lane_width <= 0:
            raise ValueError(f"lane_width must be positive, got {self.lane_width}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be non-negative, got {self.noise_std}")
        if self.duration <= 0 or self.sample_rate_hz <= 0:
            raise ValueError("duration and sample_rate_hz must be positive")
        if self.n_max < 1:
            raise ValueError(f"n_max must be >= 1, got {self.n_max}")
        if not 0 <= self.background_prob <= 1:
            raise ValueError(f"background_prob must be in [0,1], got {self.background_prob}")


def _sample_times(cfg: GeneratorConfig) -> np.ndarray:
    count = int(round(cfg.duration * cfg.sample_rate_hz)) + 1
    return np.arange(count) / cfg.sample_rate_hz


def _linear_track(
    rng: np.random.Generator,
    cfg: GeneratorConfig,
    t: np.ndarray,
    x0: float,
    y0: float,
    v_rel: float,
    v_lon: float,
    with_v_lat: bool = False,
) -> list[TrajectorySample]:
    xs = x0 + rng.normal(0.0, cfg.noise_std, t.size)
    ys = y0 + v_rel * t + rng.normal(0.0, cfg.noise_std, t.size)
    v_lat = rng.normal(0.0, 0.1) if with_v_lat else None
    return [
        TrajectorySample(float(tk), float(xk), float(yk), float(v_lon), v_lat)
        for tk, xk, yk in zip(t, xs, ys)
    ]


def _overtake_start(rng: np.random.Generator, cfg: GeneratorConfig) -> tuple[float, float]:
    # Start beyond +15 m and guarantee the end is past -8 m, so the +-5 m
    # crossing of the labeler fires even under jitter.
    v_mag = rng.uniform(*cfg.overtake_speed_range)
    travel = v_mag * cfg.duration
    y0 = rng.uniform(16.0, min(travel - 8.0, 28.0))
    return v_mag, y0


# Right-hand-traffic convention: passing happens on the left. A vehicle the
# ego overtakes therefore sits one lane to the right (+x); a vehicle passing
# the ego approaches in the left neighbor lane (-x). Fixing the side also
# keeps each class geometrically unimodal, which the clustering evaluation
# relies on.
def _overtaken_lane(cfg: GeneratorConfig) -> float:
    return cfg.lane_width


def _overtaking_lane(cfg: GeneratorConfig) -> float:
    return -cfg.lane_width


def _maybe_background(
    rng: np.random.Generator, cfg: GeneratorConfig, t: np.ndarray, ego_speed: float
) -> list[Trajectory]:
    # Far-ahead vehicle that no labeling rule can match: it never crosses
    # +-5 m and sits beyond the 30 m leading-zone at the window start.
    if rng.random() >= cfg.background_prob:
        return []
    lane = float(rng.integers(-1, 2)) * cfg.lane_width
    y0 = rng.uniform(32.0, 45.0)
    v_rel = rng.uniform(-1.5, 1.5)
    samples = _linear_track(rng, cfg, t, lane, y0, v_rel, ego_speed + v_rel)
    return [Trajectory("p1", samples)]


def generate_scenario(
    cls: ClassLabel | str | None,
    cfg: GeneratorConfig,
    seed: int,
    scenario_id: str | None = None,
) -> Scenario:
    """Generate one 5 s scenario realizing the requested class.

    cls may be a ClassLabel, the RANDOM_TRAFFIC sentinel, or None (same as
    RANDOM_TRAFFIC). Deterministic given (cls, cfg, seed). Labeled outputs
    carry their class; random traffic carries no label.
    """
    if cls is None:
        cls = RANDOM_TRAFFIC
    if not isinstance(cls, ClassLabel) and cls != RANDOM_TRAFFIC:
        raise ValueError(f"unknown class {cls!r}")
    rng = np.random.default_rng([cfg.rng_seed, _SCENARIO_STREAM, int(seed)])
    t = _sample_times(cfg)
    ego_speed = rng.uniform(*cfg.ego_speed_range)
    trajectories: list[Trajectory] = []

    if cls == ClassLabel.EGO_OVERTAKES:
        v_mag, y0 = _overtake_start(rng, cfg)
        lane = _overtaken_lane(cfg)
        samples = _linear_track(rng, cfg, t, lane, y0, -v_mag, ego_speed - v_mag)
        trajectories.append(Trajectory("p0", samples))
        trajectories.extend(_maybe_background(rng, cfg, t, ego_speed))
    elif cls == ClassLabel.EGO_BEING_OVERTAKEN:
        v_mag, y0 = _overtake_start(rng, cfg)
        lane = _overtaking_lane(cfg)
        samples = _linear_track(rng, cfg, t, lane, -y0, v_mag, ego_speed + v_mag)
        trajectories.append(Trajectory("p0", samples))
        trajectories.extend(_maybe_background(rng, cfg, t, ego_speed))
    elif cls == ClassLabel.LEADING_VEHICLE_AHEAD:
        y0 = rng.uniform(8.0, 25.0)
        v_rel = rng.uniform(*cfg.leading_speed_range)
        samples = _linear_track(rng, cfg, t, 0.0, y0, v_rel, ego_speed + v_rel)
        trajectories.append(Trajectory("p0", samples))
        trajectories.extend(_maybe_background(rng, cfg, t, ego_speed))
    else:
        count = int(rng.integers(1, cfg.n_max + 1))
        for i in range(count):
            lane = float(rng.integers(-1, 2)) * cfg.lane_width
            y0 = rng.uniform(-30.0, 30.0)
            v_rel = rng.uniform(*cfg.random_speed_range)
            t_i = t
            if rng.random() < 0.3:
                # Partial presence: this participant covers only a sub-window,
                # exercising absent-participant frames downstream.
                lo = int(rng.integers(0, t.size - 1))
                hi = int(rng.integers(lo + 2, t.size + 1))
                t_i = t[lo:hi]
            samples = _linear_track(
                rng, cfg, t_i, lane, y0, v_rel, ego_speed + v_rel, with_v_lat=True
            )
            trajectories.append(Trajectory(f"p{i}", samples))

    label = cls if isinstance(cls, ClassLabel) else None
    scenario = Scenario(
        scenario_id=scenario_id if scenario_id is not None else f"scn-{seed:06d}",
        duration=cfg.duration,
        trajectories=trajectories,
        label=label,
    )
    report = validate_scenario(scenario)
    assert report.ok, f"generator produced invalid scenario: {report.violations}"
    return scenario


def auto_label(scenario: Scenario, lane_width: float = 3.5) -> ClassLabel | None:
    """Assign one of the three maneuver classes, or None.

    Rules, each an existence test over participants:

    * EgoOvertakes: some participant's y goes from above +5 m to below -5 m
      later in the window (it falls behind the ego).
    * EgoBeingOvertaken: the mirror crossing, below -5 m then above +5 m.
    * LeadingVehicleAhead: some participant stays within the ego lane
      (|x| < lane_width/2) with y in (0, 30] at every sample and drifts
      less than 3 m overall, and neither crossing rule fired.

    Both crossing rules firing at once is contradictory, so it yields None.
    The result does not depend on trajectory order.
    """
    overtakes = False
    overtaken = False
    leading = False
    for traj in scenario.trajectories:
        ys = [s.y for s in traj.samples]
        seen_above = False
        seen_below = False
        for y in ys:
            if y > 5.0:
                if seen_below:
                    overtaken = True
                seen_above = True
            elif y < -5.0:
                if seen_above:
                    overtakes = True
                seen_below = True
        in_lane = all(abs(s.x) < lane_width / 2 for s in traj.samples)
        in_zone = all(0.0 < y <= 30.0 for y in ys)
        if in_lane and in_zone and abs(ys[-1] - ys[0]) < 3.0:
            leading = True
    if overtakes and overtaken:
        return None
    if overtakes:
        return ClassLabel.EGO_OVERTAKES
    if overtaken:
        return ClassLabel.EGO_BEING_OVERTAKEN
    if leading:
        return ClassLabel.LEADING_VEHICLE_AHEAD
    return None


def draw_class(cfg: GeneratorConfig, index: int) -> ClassLabel | str:
    """Class of the index-th dataset record; independent RNG stream per record."""
    rng = np.random.default_rng([cfg.rng_seed, _CLASS_DRAW_STREAM, int(index)])
    choice = rng.choice(len(MIX_ORDER), p=np.asarray(cfg.class_mix, dtype=float))
    return MIX_ORDER[int(choice)]


def generate_dataset(cfg: GeneratorConfig, count: int, out_path: str | Path) -> dict:
    """Write count scenarios to out_path; returns per-class counts.

    Record i draws its class and kinematics from (cfg.rng_seed, i) only, so
    any sharded or parallel generation agrees with the serial one.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    scenarios = []
    counts: dict[str, int] = {label.value: 0 for label in MIX_ORDER[:3]}
    counts[RANDOM_TRAFFIC] = 0
    for i in range(count):
        cls = draw_class(cfg, i)
        scenarios.append(generate_scenario(cls, cfg, seed=i))
        key = cls.value if isinstance(cls, ClassLabel) else RANDOM_TRAFFIC
        counts[key] += 1
    write_scenarios(out_path, scenarios)
    return {"count": count, "path": str(out_path), "per_class": counts}
