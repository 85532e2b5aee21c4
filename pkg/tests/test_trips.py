import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sigtiming.core import CENTER_PASSAGE_M, IntersectionGeometry, Trajectory
from sigtiming.trips import (
    FilterOutcome,
    TrajectorySegment,
    apply_filters,
    clip_to_intersection,
    extract_stop_events,
    has_stop_pattern,
    process_trajectories,
)

GEOM = IntersectionGeometry("I1", (0.0, 0.0))


def eastbound(speeds, t0=0.0, times=None, end_at_center=True):
    """A trace heading east whose last sample is the closest point to the center."""
    speeds = np.asarray(speeds, float)
    t = np.arange(len(speeds), dtype=float) + t0 if times is None else np.asarray(times, float)
    x = np.cumsum(speeds) - speeds.sum() if end_at_center else np.cumsum(speeds) - 60.0
    traj = Trajectory("v1", t, x, np.zeros_like(x), speeds, np.full_like(x, 90.0))
    return TrajectorySegment("v1", "I1", traj, np.hypot(x, 0.0) + np.linspace(1e-6, 0, len(x)))


def test_hand_traced_single_stop():
    (ev,) = extract_stop_events(eastbound([8, 4, 0, 0, 0, 0, 2, 6], t0=100))
    assert (ev.stop_start_s, ev.accel_start_s, ev.stop_duration_s) == (102, 106, 4)
    assert ev.direction == "E" and ev.movement == "through"
    assert ev.hour_of_day == 0 and ev.tod_bin == "OffPeak"


def test_two_stops_in_one_approach():
    evs = extract_stop_events(eastbound([5, 0, 3, 0, 0, 4]))
    assert [(e.stop_start_s, e.accel_start_s) for e in evs] == [(1, 2), (3, 5)]


def test_constant_speed_has_no_events():
    assert extract_stop_events(eastbound([7] * 20)) == []


def test_stops_after_center_are_ignored():
    seg = eastbound([8, 4, 0, 0, 2, 6], end_at_center=False)
    # the center is passed at index 0 here, so the stop lies downstream
    seg = TrajectorySegment(seg.vehicle_id, seg.intersection_id, seg.traj, np.arange(6, dtype=float))
    assert extract_stop_events(seg) == []


def test_plan_phases_filter_unserved_movements():
    seg = eastbound([8, 4, 0, 0, 2, 6])
    assert extract_stop_events(seg, GEOM, [("N", "through")]) == []
    assert len(extract_stop_events(seg, GEOM, [("E", "through")])) == 1


def test_clip_outside_radius():
    tr = Trajectory("v", [0, 1, 2], [500, 510, 520], [0, 0, 0], [10, 10, 10], [90, 90, 90])
    assert clip_to_intersection(tr, GEOM) == []


def test_clip_straight_pass_keeps_closest_point():
    x = np.arange(-300.0, 301.0, 10.0)
    tr = Trajectory("v", np.arange(len(x)), x, np.full_like(x, 2.0), np.full_like(x, 10.0), np.full_like(x, 90.0))
    (seg,) = clip_to_intersection(tr, GEOM)
    assert seg.min_center_distance_m == pytest.approx(2.0)
    assert np.all(seg.distance <= 152.4)
    assert seg.duration_s == seg.traj.t[-1] - seg.traj.t[0]


def test_clip_dumbbell_gives_two_segments():
    # out, in, out, in again: a trip that loops back
    x = np.concatenate([np.linspace(-300, 0, 31), np.linspace(10, 300, 30), np.linspace(290, -50, 35)])
    n = len(x)
    tr = Trajectory("v", np.arange(n), x, np.zeros(n), np.full(n, 10.0), np.full(n, 90.0))
    segs = clip_to_intersection(tr, GEOM)
    assert len(segs) == 2
    assert segs[0].traj.t[-1] < segs[1].traj.t[0]


def test_filter_reasons():
    assert apply_filters(eastbound([8, 4, 0, 0, 2, 6])) == FilterOutcome(True)
    gap = eastbound([8, 4, 0, 0, 2, 6], times=[0, 1, 2, 3, 15, 16])
    assert apply_filters(gap).rejection_reason == "sparse_gap"
    long = eastbound([5] * 50 + [0] * 96 + [2, 4, 6, 8, 10])
    assert long.duration_s == 150
    assert apply_filters(long).rejection_reason == "too_long"
    assert apply_filters(eastbound([8, 6, 4, 3, 4, 6])).rejection_reason == "no_stop_pattern"
    far = eastbound([8, 4, 0, 0, 2, 6])
    far = TrajectorySegment("v1", "I1", far.traj, far.distance + 40.0)
    assert apply_filters(far).rejection_reason == "no_center_passage"


def test_gap_of_exactly_ten_seconds_is_rejected():
    seg = eastbound([8, 4, 0, 0, 2, 6], times=[0, 1, 2, 3, 13, 14])
    assert apply_filters(seg).rejection_reason == "sparse_gap"


def test_filter_outcome_invariant():
    with pytest.raises(ValueError):
        FilterOutcome(True, "too_long")


def _stop_pattern_oracle(v, eps=0.05):
    n = len(v)
    for i in range(n):
        for j in range(i + 1, n):
            if v[j] < eps and v[j - 1] >= eps and v[i] > v[j]:
                # strictly decreasing into the stop, then positive afterwards
                if all(v[m] > v[m + 1] for m in range(i, j)):
                    k = j
                    while k < n and v[k] < eps:
                        k += 1
                    if k < n:
                        return True
    return False


segments = st.builds(
    lambda speeds, gaps, offset: (speeds, gaps, offset),
    st.lists(st.sampled_from([0.0, 0.0, 0.01, 1.0, 3.0, 8.0]), min_size=2, max_size=40),
    st.lists(st.sampled_from([1.0, 1.0, 1.0, 2.0, 9.0, 10.0, 30.0]), min_size=39, max_size=39),
    st.floats(0.0, 30.0),
)


@settings(max_examples=300, deadline=None)
@given(segments)
def test_filter_conjunction(case):
    speeds, gaps, offset = case
    v = np.array(speeds)
    t = np.concatenate([[0.0], np.cumsum(gaps[: len(v) - 1])])
    tr = Trajectory("v", t, np.zeros_like(v), np.zeros_like(v), v, np.zeros_like(v))
    dist = np.abs(np.linspace(-1, 1, len(v))) * 50 + offset
    seg = TrajectorySegment("v", "I", tr, dist)
    preds = (
        np.diff(t).max() < 10,
        t[-1] - t[0] <= 120,
        dist.min() <= CENTER_PASSAGE_M,
        _stop_pattern_oracle(v),
    )
    assert has_stop_pattern(v) == preds[3]
    assert apply_filters(seg).accepted == all(preds)
    if apply_filters(seg).accepted:
        for ev in extract_stop_events(seg):
            assert 1 <= ev.stop_duration_s <= seg.duration_s


def test_process_trajectories_sorted_and_tallied():
    x = np.concatenate([np.linspace(-140, -20, 13), [-20, -20, -20], np.linspace(-15, 140, 20)])
    n = len(x)
    v = np.concatenate([np.full(12, 10.0), [5.0], [0.0, 0.0, 0.0], [2.0], np.full(19, 9.0)])
    trajs = [Trajectory(vid, np.arange(n) + 50, x, np.zeros(n), v, np.full(n, 90.0)) for vid in ("b", "a")]
    trajs.append(Trajectory("c", np.arange(n), x, np.full(n, 400.0), v, np.full(n, 90.0)))
    events, tally = process_trajectories(trajs, [GEOM])
    assert [e.vehicle_id for e in events] == ["a", "b"]
    assert tally["none"] == 2 and sum(tally.values()) == 2
