"""Shared domain types and small arithmetic helpers.

Units are SI throughout (meters, m/s, seconds). Headings are compass degrees,
0 = north, increasing clockwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

FEET_TO_M = 0.3048
BOUNDING_RADIUS_M = 500 * FEET_TO_M  # 152.4
CENTER_PASSAGE_M = 50 * FEET_TO_M  # 15.24

DIRECTIONS = ("N", "E", "S", "W")
MOVEMENTS = ("through", "left", "right")
TOD_BINS = ("AM", "PM", "OffPeak")

AM_HOURS = (6, 9)
PM_HOURS = (15, 18)


class DomainError(ValueError):
    """Inputs violate an operation's preconditions."""


PhaseKey = tuple  # (direction, movement)


@dataclass(frozen=True)
class TracePoint:
    vehicle_id: str
    t: float
    x: float
    y: float
    speed: float
    heading: float


class Trajectory:
    """Time-ordered 1 Hz probe records of one vehicle, stored column-wise.

    Columns are read-only numpy arrays; ``points`` materializes
    :class:`TracePoint` objects on demand.
    """

    __slots__ = ("vehicle_id", "t", "x", "y", "speed", "heading")

    def __init__(self, vehicle_id, t, x, y, speed, heading):
        self.vehicle_id = str(vehicle_id)
        cols = [np.array(c, dtype=np.float64) for c in (t, x, y, speed, heading)]
        n = len(cols[0])
        if any(len(c) != n for c in cols):
            raise DomainError("trajectory columns differ in length")
        if n > 1 and not np.all(np.diff(cols[0]) > 0):
            raise DomainError(f"timestamps of {vehicle_id} are not strictly increasing")
        if np.any(cols[3] < 0):
            raise DomainError(f"negative speed in {vehicle_id}")
        if np.any((cols[4] < 0) | (cols[4] >= 360)):
            raise DomainError(f"heading outside [0, 360) in {vehicle_id}")
        for c in cols:
            c.setflags(write=False)
        self.t, self.x, self.y, self.speed, self.heading = cols

    @classmethod
    def from_points(cls, points: list[TracePoint]) -> "Trajectory":
        if not points:
            raise DomainError("empty trajectory")
        vid = points[0].vehicle_id
        if any(p.vehicle_id != vid for p in points):
            raise DomainError("points belong to several vehicles")
        return cls(
            vid,
            [p.t for p in points],
            [p.x for p in points],
            [p.y for p in points],
            [p.speed for p in points],
            [p.heading for p in points],
        )

    def __len__(self) -> int:
        return len(self.t)

    @property
    def points(self) -> list[TracePoint]:
        return list(self.iter_points())

    def iter_points(self) -> Iterator[TracePoint]:
        for i in range(len(self.t)):
            yield TracePoint(
                self.vehicle_id,
                float(self.t[i]),
                float(self.x[i]),
                float(self.y[i]),
                float(self.speed[i]),
                float(self.heading[i]),
            )

    def slice(self, start: int, stop: int) -> "Trajectory":
        return Trajectory(
            self.vehicle_id,
            self.t[start:stop],
            self.x[start:stop],
            self.y[start:stop],
            self.speed[start:stop],
            self.heading[start:stop],
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return self.vehicle_id == other.vehicle_id and all(
            np.array_equal(a, b)
            for a, b in zip(
                (self.t, self.x, self.y, self.speed, self.heading),
                (other.t, other.x, other.y, other.speed, other.heading),
            )
        )

    def __repr__(self) -> str:
        return f"Trajectory({self.vehicle_id!r}, n={len(self)})"


@dataclass(frozen=True)
class IntersectionGeometry:
    intersection_id: str
    center: tuple[float, float]
    approach_headings: Mapping[str, float] = field(
        default_factory=lambda: {"N": 0.0, "E": 90.0, "S": 180.0, "W": 270.0}
    )

    def __post_init__(self):
        heads = list(self.approach_headings.values())
        if len(heads) < 2:
            raise DomainError("an intersection needs at least two approaches")
        if len(set(heads)) != len(heads):
            raise DomainError("approach headings must be distinct")
        if not set(self.approach_headings) <= set(DIRECTIONS):
            raise DomainError(f"unknown approach direction in {sorted(self.approach_headings)}")


@dataclass(frozen=True)
class Phase:
    phase_id: str
    direction: str
    movement: str
    red_s: float
    green_s: float
    red_start_offset_s: float = 0.0

    @property
    def key(self) -> PhaseKey:
        return (self.direction, self.movement)

    @property
    def cycle_s(self) -> float:
        return self.red_s + self.green_s


@dataclass(frozen=True)
class SignalPlan:
    intersection_id: str
    cycle_s: float
    phases: tuple[Phase, ...]
    plan_offset_s: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple(self.phases))
        if not 30 <= self.cycle_s <= 180:
            raise DomainError(f"cycle {self.cycle_s} s outside [30, 180]")
        for p in self.phases:
            if p.red_s <= 0 or p.green_s <= 0:
                raise DomainError(f"phase {p.phase_id} has a non-positive interval")
            if p.red_s + p.green_s != self.cycle_s:
                raise DomainError(
                    f"phase {p.phase_id}: red {p.red_s} + green {p.green_s} != cycle {self.cycle_s}"
                )
            if not 0 <= p.red_start_offset_s < self.cycle_s:
                raise DomainError(f"phase {p.phase_id} red offset outside the cycle")

    def phase(self, direction: str, movement: str = "through") -> Phase:
        for p in self.phases:
            if p.direction == direction and p.movement == movement:
                return p
        matches = [p for p in self.phases if p.direction == direction]
        if len(matches) == 1:
            return matches[0]
        raise KeyError((self.intersection_id, direction, movement))

    def is_red(self, phase: Phase, t: float) -> bool:
        tau = (t - self.plan_offset_s - phase.red_start_offset_s) % self.cycle_s
        return tau < phase.red_s


def two_phase_plan(intersection_id: str, cycle_s: int, ew_green_s: int, offset_s: int = 0) -> SignalPlan:
    """Pre-timed plan with an east-west and a north-south through phase.

    East-west is green for the first ``ew_green_s`` seconds of each cycle,
    north-south for the remainder.
    """
    ns_green = cycle_s - ew_green_s
    phases = []
    for d in ("E", "W"):
        phases.append(Phase(f"{d}T", d, "through", ns_green, ew_green_s, ew_green_s % cycle_s))
    for d in ("N", "S"):
        phases.append(Phase(f"{d}T", d, "through", ew_green_s, ns_green, 0))
    return SignalPlan(intersection_id, cycle_s, tuple(phases), offset_s)


@dataclass(frozen=True)
class StopEvent:
    intersection_id: str
    vehicle_id: str
    direction: str
    movement: str
    stop_start_s: float
    stop_duration_s: float
    accel_start_s: float
    hour_of_day: int
    tod_bin: str

    @property
    def phase_key(self) -> PhaseKey:
        return (self.direction, self.movement)


def derive_green(cycle_s: float, red_s: float) -> float:
    if not 0 < red_s < cycle_s:
        raise DomainError(f"red {red_s} s is not inside (0, cycle {cycle_s} s)")
    return cycle_s - red_s


def classify_direction(heading_deg: float) -> str:
    """Nearest cardinal direction; arc boundaries go to the smaller angle."""
    h = heading_deg % 360.0
    if h <= 45.0 or h > 315.0:
        return "N"
    if h <= 135.0:
        return "E"
    if h <= 225.0:
        return "S"
    return "W"


def heading_difference(heading_in: float, heading_out: float) -> float:
    """Signed turn angle wrapped to (-180, 180]."""
    d = (heading_out - heading_in) % 360.0
    return d - 360.0 if d > 180.0 else d


def classify_movement(heading_in: float, heading_out: float) -> str:
    d = heading_difference(heading_in, heading_out)
    if abs(d) < 45.0:
        return "through"
    return "left" if d < 0 else "right"


def tod_bin(hour: int, am=AM_HOURS, pm=PM_HOURS) -> str:
    if not 0 <= hour <= 23:
        raise DomainError(f"hour {hour} outside 0-23")
    if am[0] <= hour <= am[1]:
        return "AM"
    if pm[0] <= hour <= pm[1]:
        return "PM"
    return "OffPeak"
