"""Clip probe trips around intersections, filter them, and extract stops."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .core import (
    BOUNDING_RADIUS_M,
    CENTER_PASSAGE_M,
    IntersectionGeometry,
    StopEvent,
    Trajectory,
    classify_direction,
    classify_movement,
    tod_bin,
)

STOP_SPEED_EPS = 0.05
MAX_GAP_S = 10.0
MAX_DURATION_S = 120.0

REJECTION_REASONS = ("no_stop_pattern", "sparse_gap", "no_center_passage", "too_long", "none")


@dataclass(frozen=True)
class TrajectorySegment:
    vehicle_id: str
    intersection_id: str
    traj: Trajectory
    distance: np.ndarray  # to the intersection center, per point

    @property
    def min_center_distance_m(self) -> float:
        return float(self.distance.min())

    @property
    def duration_s(self) -> float:
        return float(self.traj.t[-1] - self.traj.t[0])

    @property
    def max_gap_s(self) -> float:
        if len(self.traj) < 2:
            return 0.0
        return float(np.diff(self.traj.t).max())

    @property
    def center_index(self) -> int:
        return int(np.argmin(self.distance))


@dataclass(frozen=True)
class FilterOutcome:
    accepted: bool
    rejection_reason: str = "none"

    def __post_init__(self):
        if self.accepted != (self.rejection_reason == "none"):
            raise ValueError("accepted must coincide with rejection_reason == 'none'")


def clip_to_intersection(
    traj: Trajectory, geom: IntersectionGeometry, radius_m: float = BOUNDING_RADIUS_M
) -> list[TrajectorySegment]:
    """Maximal runs of consecutive points within ``radius_m`` of the center."""
    cx, cy = geom.center
    dist = np.hypot(traj.x - cx, traj.y - cy)
    inside = dist <= radius_m
    if not inside.any():
        return []
    edges = np.diff(np.concatenate(([0], inside.astype(np.int8), [0])))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    return [
        TrajectorySegment(traj.vehicle_id, geom.intersection_id, traj.slice(a, b), dist[a:b])
        for a, b in zip(starts, stops)
    ]


def has_stop_pattern(speed: np.ndarray, eps: float = STOP_SPEED_EPS) -> bool:
    """Deceleration into a standstill followed later by a positive speed."""
    zero = speed < eps
    for j in range(1, len(speed)):
        if zero[j] and not zero[j - 1] and speed[j - 1] > speed[j]:
            k = j
            while k < len(speed) and zero[k]:
                k += 1
            if k < len(speed):
                return True
    return False


def apply_filters(
    seg: TrajectorySegment,
    max_gap_s: float = MAX_GAP_S,
    max_duration_s: float = MAX_DURATION_S,
    center_m: float = CENTER_PASSAGE_M,
    eps: float = STOP_SPEED_EPS,
) -> FilterOutcome:
    # reported in the order gap, duration, center passage, stop pattern
    if seg.max_gap_s >= max_gap_s:
        return FilterOutcome(False, "sparse_gap")
    if seg.duration_s > max_duration_s:
        return FilterOutcome(False, "too_long")
    if seg.min_center_distance_m > center_m:
        return FilterOutcome(False, "no_center_passage")
    if not has_stop_pattern(seg.traj.speed, eps):
        return FilterOutcome(False, "no_stop_pattern")
    return FilterOutcome(True)


def extract_stop_events(
    seg: TrajectorySegment,
    geom: IntersectionGeometry | None = None,
    plan_phases=None,
    eps: float = STOP_SPEED_EPS,
    am=None,
    pm=None,
) -> list[StopEvent]:
    """Stops made before the closest approach to the center.

    A stop starts at its first near-zero sample and ends at the first later
    sample whose speed exceeds the one before it. ``plan_phases`` (phase keys
    of the intersection's plan), when given, drops events whose
    (direction, movement) the plan does not serve.
    """
    tr = seg.traj
    t, v, hd = tr.t, tr.speed, tr.heading
    n = len(t)
    if n < 2:
        return []
    center = seg.center_index
    movement = classify_movement(float(hd[0]), float(hd[-1]))
    tod_kw = {}
    if am is not None:
        tod_kw["am"] = am
    if pm is not None:
        tod_kw["pm"] = pm
    events = []
    zero = v < eps
    j = 0
    while j < n:
        if not zero[j] or (j > 0 and zero[j - 1]):
            j += 1
            continue
        if j >= center:
            break
        k = j + 1
        while k < n and not v[k] > v[k - 1]:
            k += 1
        if k >= n:
            break
        moving = np.flatnonzero(~zero[:j])
        head = float(hd[moving[-1]]) if len(moving) else float(hd[j])
        direction = classify_direction(head)
        stop_start = float(t[j])
        accel = float(t[k])
        hour = int(stop_start // 3600) % 24
        ev = StopEvent(
            seg.intersection_id,
            seg.vehicle_id,
            direction,
            movement,
            stop_start,
            accel - stop_start,
            accel,
            hour,
            tod_bin(hour, **tod_kw),
        )
        if plan_phases is None or ev.phase_key in set(plan_phases):
            events.append(ev)
        j = k
    return events


def process_trajectories(
    trajs: Iterable[Trajectory],
    geoms: Iterable[IntersectionGeometry],
    plan_phases: dict | None = None,
    radius_m: float = BOUNDING_RADIUS_M,
) -> tuple[list[StopEvent], dict]:
    """Clip, filter and extract over a whole corpus.

    Returns the events sorted by (vehicle id, time) and a tally of filter
    outcomes keyed by rejection reason.
    """
    geoms = list(geoms)
    tally = dict.fromkeys(REJECTION_REASONS, 0)
    events: list[StopEvent] = []
    for tr in trajs:
        for g in geoms:
            for seg in clip_to_intersection(tr, g, radius_m):
                out = apply_filters(seg)
                tally[out.rejection_reason] += 1
                if out.accepted:
                    phases = None if plan_phases is None else plan_phases.get(g.intersection_id)
                    events.extend(extract_stop_events(seg, g, phases))
    events.sort(key=lambda e: (e.vehicle_id, e.stop_start_s, e.intersection_id))
    return events, tally
