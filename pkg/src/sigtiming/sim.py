"""Synthetic corridor of pre-timed signals emitting 1 Hz probe trajectories.

The corridor is an east-west arterial through every intersection plus a short
north-south cross street at each one. Every approach is a single lane.
Vehicles advance in 1 s steps: the speed for the next second is the largest
value that respects the acceleration limit, the cruise speed, and a
Gipps-style safe-stopping distance behind the leader (or the stop line when
the signal is red and the vehicle can still stop). A vehicle standing still
behind another may only start once its leader has been moving for one
saturation headway, which makes a queue discharge at ``(k - 1) * headway``.
"""

from __future__ import annotations

import hashlib
import math
import zlib
from bisect import bisect_left
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import (
    DomainError,
    IntersectionGeometry,
    SignalPlan,
    Trajectory,
    two_phase_plan,
)

HEADING = {"N": 0.0, "E": 90.0, "S": 180.0, "W": 270.0}
UNIT = {"N": (0.0, 1.0), "E": (1.0, 0.0), "S": (0.0, -1.0), "W": (-1.0, 0.0)}


class SpillbackError(RuntimeError):
    """A queue outgrew its link; the demand is unusable for this corridor."""


@dataclass(frozen=True)
class SimIntersection:
    geometry: IntersectionGeometry
    plan: SignalPlan
    spacing_m: float  # distance from the previous center; first entry = end-link length


@dataclass(frozen=True)
class SimConfig:
    intersections: tuple[SimIntersection, ...]
    # (intersection_id, direction) -> vph, or 24 hourly values
    demand_vph: Mapping[tuple[str, str], float | Sequence[float]]
    duration_s: float
    cruise_speed_mps: float = 13.4
    max_accel_mps2: float = 2.0
    max_decel_mps2: float = 3.0
    saturation_headway_s: float = 2.0
    stopline_setback_m: float = 3.0
    probe_penetration: float = 1.0
    rng_seed: int = 0
    lane_offset_m: float = 1.75
    jam_spacing_m: float = 7.0
    side_link_m: float = 300.0
    arterial_exit_prob: float = 0.5
    max_entry_wait_s: float = 120.0

    def __post_init__(self):
        object.__setattr__(self, "intersections", tuple(self.intersections))
        if self.duration_s <= 0:
            raise DomainError("duration_s must be positive")
        if not 0 < self.probe_penetration <= 1:
            raise DomainError("probe_penetration must lie in (0, 1]")
        for name in (
            "cruise_speed_mps",
            "max_accel_mps2",
            "max_decel_mps2",
            "saturation_headway_s",
            "stopline_setback_m",
            "jam_spacing_m",
            "side_link_m",
        ):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be positive")
        if not 0 <= self.arterial_exit_prob <= 1:
            raise DomainError("arterial_exit_prob must lie in [0, 1]")
        if not self.intersections:
            raise DomainError("no intersections")
        ids = [si.geometry.intersection_id for si in self.intersections]
        if len(set(ids)) != len(ids):
            raise DomainError("duplicate intersection ids")
        for si in self.intersections:
            if si.plan.intersection_id != si.geometry.intersection_id:
                raise DomainError(f"plan/geometry id mismatch at {si.geometry.intersection_id}")
        ys = {si.geometry.center[1] for si in self.intersections}
        xs = [si.geometry.center[0] for si in self.intersections]
        if len(ys) != 1 or any(b <= a for a, b in zip(xs, xs[1:])):
            raise DomainError("intersection centers must lie west to east on one east-west line")
        for a, b in zip(self.intersections, self.intersections[1:]):
            gap = b.geometry.center[0] - a.geometry.center[0]
            if abs(gap - b.spacing_m) > 1e-6:
                raise DomainError(f"spacing of {b.geometry.intersection_id} disagrees with its center")

    @property
    def hours(self) -> int:
        return int(math.ceil(self.duration_s / 3600.0))


@dataclass(frozen=True)
class QueueRecord:
    """A stop the simulator observed on an approach (for oracle checks)."""

    vehicle_id: str
    intersection_id: str
    direction: str
    stop_start_s: float
    depart_s: float | None
    queue_position: int  # 0 = first at the stop line
    distance_to_center_m: float


@dataclass(frozen=True)
class GroundTruth:
    plans: Mapping[str, SignalPlan]
    hours: int
    queue_log: tuple[QueueRecord, ...] = field(default=(), compare=False)

    def covers(self, intersection_id: str, hour: int) -> bool:
        return intersection_id in self.plans and 0 <= hour < self.hours

    def cycle(self, intersection_id: str, hour: int) -> float:
        if not self.covers(intersection_id, hour):
            raise KeyError((intersection_id, hour))
        return self.plans[intersection_id].cycle_s

    def red(self, intersection_id: str, phase_key: tuple[str, str], hour: int) -> float:
        if not self.covers(intersection_id, hour):
            raise KeyError((intersection_id, phase_key, hour))
        return self.plans[intersection_id].phase(*phase_key).red_s

    def targets(self) -> dict:
        """(intersection, phase key, hour) -> (cycle_s, red_s)."""
        out = {}
        for iid, plan in self.plans.items():
            for p in plan.phases:
                for h in range(self.hours):
                    out[(iid, p.key, h)] = (plan.cycle_s, p.red_s)
        return out


# -- kinematics ---------------------------------------------------------------


def stop_distance(v: float, b: float) -> float:
    """Distance covered while braking at ``b`` per 1 s step from speed ``v``."""
    if v <= b:
        return 0.0
    m = math.ceil(v / b) - 1
    return m * v - b * m * (m + 1) / 2.0


def safe_speed(d: float, b: float) -> float:
    """Largest ``v`` with ``v + stop_distance(v) <= d``."""
    if d <= 0:
        return 0.0
    m = max(0, math.ceil((-3.0 + math.sqrt(1.0 + 8.0 * d / b)) / 2.0 - 1e-12))
    return (d + b * m * (m + 1) / 2.0) / (m + 1)


# -- randomness ---------------------------------------------------------------


def stream_seed(seed: int, *key) -> np.random.SeedSequence:
    """Independent seed sequence per key; stable across processes."""
    tag = zlib.crc32("|".join(map(str, key)).encode())
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, tag])


def keep_probability_draw(vehicle_id: str, seed: int) -> float:
    digest = hashlib.blake2b(f"{int(seed)}:{vehicle_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") / 2.0**64


def probe_seed(rng_seed: int) -> int:
    return (int(rng_seed) ^ 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF


def sample_probes(trajs: Sequence[Trajectory], penetration: float, seed: int) -> list[Trajectory]:
    """Keep whole trajectories, each independently with probability ``penetration``."""
    if not 0 < penetration <= 1:
        raise DomainError("penetration must lie in (0, 1]")
    if penetration == 1.0:
        return list(trajs)
    return [tr for tr in trajs if keep_probability_draw(tr.vehicle_id, seed) < penetration]


def hourly_rate(demand: float | Sequence[float], hour: int) -> float:
    if isinstance(demand, (int, float)):
        return float(demand)
    return float(demand[hour % len(demand)])


def poisson_arrivals(demand, duration_s: float, rng: np.random.Generator) -> np.ndarray:
    """Non-homogeneous Poisson arrivals by thinning a peak-rate process."""
    hours = int(math.ceil(duration_s / 3600.0))
    rates = np.array([hourly_rate(demand, h) for h in range(max(hours, 1))]) / 3600.0
    if np.any(rates < 0):
        raise DomainError("negative demand")
    peak = rates.max()
    if peak <= 0:
        return np.empty(0)
    times = []
    t = 0.0
    while True:
        t += rng.exponential(1.0 / peak)
        if t >= duration_s:
            break
        if rng.random() * peak < rates[int(t // 3600)]:
            times.append(t)
    return np.asarray(times)


# -- network ------------------------------------------------------------------


class _Lane:
    def __init__(self, name, direction, origin, length, crossings):
        self.name = name
        self.direction = direction
        self.origin = origin
        self.ux, self.uy = UNIT[direction]
        self.heading = HEADING[direction]
        self.length = length
        # list of (intersection_id, center_s, plan, phase), ordered along the lane
        self.crossings = crossings
        self.vehicles: list[_Vehicle] = []  # front first

    def xy(self, s: float) -> tuple[float, float]:
        return self.origin[0] + s * self.ux, self.origin[1] + s * self.uy


class _Vehicle:
    __slots__ = (
        "vid", "lane", "s", "v", "exit_s", "next_k", "last_k", "probe",
        "last_depart", "stop_rec", "ts", "xs", "ys", "vs",
    )

    def __init__(self, vid, lane, s, v, exit_s, next_k, last_k, probe):
        self.vid = vid
        self.lane = lane
        self.s = s
        self.v = v
        self.exit_s = exit_s
        self.next_k = next_k
        self.last_k = last_k
        self.probe = probe
        self.last_depart = None
        self.stop_rec = None
        self.ts, self.xs, self.ys, self.vs = [], [], [], []


def _build_lanes(cfg: SimConfig):
    ints = cfg.intersections
    off = cfg.lane_offset_m
    end = ints[0].spacing_m
    x0 = ints[0].geometry.center[0]
    xn = ints[-1].geometry.center[0]
    y = ints[0].geometry.center[1]
    total = (xn - x0) + 2 * end

    def crossing(si, center_s, direction):
        plan = si.plan
        return (si.geometry.intersection_id, center_s, plan, plan.phase(direction))

    lanes = {}
    eb = [crossing(si, si.geometry.center[0] - x0 + end, "E") for si in ints]
    lanes["EB"] = _Lane("EB", "E", (x0 - end, y - off), total, eb)
    wb = [crossing(si, xn + end - si.geometry.center[0], "W") for si in reversed(ints)]
    lanes["WB"] = _Lane("WB", "W", (xn + end, y + off), total, wb)
    side = cfg.side_link_m
    for si in ints:
        cx, cy = si.geometry.center
        iid = si.geometry.intersection_id
        heads = si.geometry.approach_headings
        if "N" in heads:
            lanes[f"NB:{iid}"] = _Lane(f"NB:{iid}", "N", (cx + off, cy - side), 2 * side, [crossing(si, side, "N")])
        if "S" in heads:
            lanes[f"SB:{iid}"] = _Lane(f"SB:{iid}", "S", (cx - off, cy + side), 2 * side, [crossing(si, side, "S")])
    return lanes


def _entry_specs(cfg: SimConfig, lanes):
    """(intersection_id, direction) -> (lane, entry crossing index)."""
    specs = {}
    n = len(cfg.intersections)
    for i, si in enumerate(cfg.intersections):
        iid = si.geometry.intersection_id
        specs[(iid, "E")] = (lanes["EB"], i)
        specs[(iid, "W")] = (lanes["WB"], n - 1 - i)
        if f"NB:{iid}" in lanes:
            specs[(iid, "N")] = (lanes[f"NB:{iid}"], 0)
        if f"SB:{iid}" in lanes:
            specs[(iid, "S")] = (lanes[f"SB:{iid}"], 0)
    return specs


def _entry_s(lane: _Lane, k: int) -> float:
    if k == 0:
        return 0.0
    return 0.5 * (lane.crossings[k - 1][1] + lane.crossings[k][1])


def _exit_s(lane: _Lane, k: int) -> float:
    if k == len(lane.crossings) - 1:
        return lane.length
    return 0.5 * (lane.crossings[k][1] + lane.crossings[k + 1][1])


def simulate(config: SimConfig) -> tuple[list[Trajectory], GroundTruth]:
    """Run the corridor; return probe trajectories sorted by vehicle id and ground truth."""
    cfg = config
    a, b = cfg.max_accel_mps2, cfg.max_decel_mps2
    cruise, hw = cfg.cruise_speed_mps, cfg.saturation_headway_s
    jam, setback = cfg.jam_spacing_m, cfg.stopline_setback_m
    creep = 0.1
    pseed = probe_seed(cfg.rng_seed)
    lanes = _build_lanes(cfg)
    specs = _entry_specs(cfg, lanes)

    unknown = set(cfg.demand_vph) - set(specs)
    if unknown:
        raise DomainError(f"demand for unknown approaches: {sorted(unknown)}")

    # arrivals, generated per approach from an independent stream
    arrivals = []  # (step, vid, lane, entry_k, last_k)
    for key in sorted(cfg.demand_vph):
        lane, k = specs[key]
        rng = np.random.default_rng(stream_seed(cfg.rng_seed, "arrivals", *key))
        times = poisson_arrivals(cfg.demand_vph[key], cfg.duration_s, rng)
        for n, t in enumerate(times):
            last = k
            while last < len(lane.crossings) - 1 and rng.random() >= cfg.arterial_exit_prob:
                last += 1
            vid = f"{key[0]}:{key[1]}:{n:05d}"
            arrivals.append((int(math.ceil(t)), vid, lane, k, last))
    arrivals.sort(key=lambda r: (r[0], r[1]))

    finished: list[Trajectory] = []
    queue_log: list[QueueRecord] = []
    pending: list[tuple] = []
    ai = 0
    n_steps = int(math.floor(cfg.duration_s))

    def retire(veh):
        if veh.probe and veh.ts:
            n = len(veh.ts)
            finished.append(
                Trajectory(veh.vid, veh.ts, veh.xs, veh.ys, veh.vs, np.full(n, veh.lane.heading))
            )

    def signal_distance(veh, t):
        """Distance to a red stop line the vehicle can still stop for, else inf."""
        if veh.next_k > veh.last_k:
            return math.inf
        iid, cs, plan, phase = veh.lane.crossings[veh.next_k]
        if not plan.is_red(phase, t):
            return math.inf
        ds = cs - setback - veh.s
        if stop_distance(veh.v, b) <= ds + 1e-9:
            return ds
        return math.inf

    for t in range(n_steps + 1):
        # insert arrivals due by now, in arrival order; blocked entries wait
        while ai < len(arrivals) and arrivals[ai][0] <= t:
            pending.append(arrivals[ai])
            ai += 1
        still = []
        blocked_lanes = set()
        for rec in pending:
            step, vid, lane, k, last = rec
            if (lane.name, k) in blocked_lanes:
                still.append(rec)
                continue
            s0 = _entry_s(lane, k)
            vehs = lane.vehicles
            # vehicles are front first, so positions are descending
            pos = [-v.s for v in vehs]
            idx = bisect_left(pos, -s0)
            leader = vehs[idx - 1] if idx > 0 else None
            follower = vehs[idx] if idx < len(vehs) else None
            d = math.inf
            if leader is not None:
                d = leader.s + stop_distance(leader.v, b) - jam - s0
            v0 = min(cruise, safe_speed(d, b)) if d < math.inf else cruise
            ok = d >= 0
            if ok and follower is not None:
                ok = follower.s + stop_distance(follower.v, b) <= s0 + stop_distance(v0, b) - jam
            if ok and follower is not None and follower.s >= s0 - 1e-9:
                ok = False
            if not ok:
                if t - step > cfg.max_entry_wait_s:
                    raise SpillbackError(
                        f"entry of {lane.name} at crossing {k} blocked for over "
                        f"{cfg.max_entry_wait_s:.0f} s (t={t})"
                    )
                blocked_lanes.add((lane.name, k))
                still.append(rec)
                continue
            probe = cfg.probe_penetration >= 1.0 or keep_probability_draw(vid, pseed) < cfg.probe_penetration
            veh = _Vehicle(vid, lane, s0, v0, _exit_s(lane, last), k, last, probe)
            vehs.insert(idx, veh)
        pending = still

        # record state at t
        for lane in lanes.values():
            for veh in lane.vehicles:
                if veh.probe:
                    x, y = lane.xy(veh.s)
                    veh.ts.append(float(t))
                    veh.xs.append(x)
                    veh.ys.append(y)
                    veh.vs.append(veh.v)

        if t == n_steps:
            break

        # advance to t + 1 using states at t
        for lane in lanes.values():
            vehs = lane.vehicles
            new_v = []
            for i, veh in enumerate(vehs):
                leader = vehs[i - 1] if i > 0 else None
                d = math.inf
                if leader is not None:
                    d = leader.s + stop_distance(leader.v, b) - jam - veh.s
                d = min(d, signal_distance(veh, t))
                v = veh.v
                # a standing vehicle close behind its leader waits for the
                # leader to have been rolling for one saturation headway
                if v == 0.0 and leader is not None and leader.s - veh.s < 3 * jam:
                    if leader.v == 0.0 or (leader.last_depart is not None and t < leader.last_depart + hw):
                        d = min(d, 0.0)
                vn = min(v + a, cruise, safe_speed(d, b)) if d < math.inf else min(v + a, cruise)
                if vn < creep and v <= b:
                    vn = 0.0
                new_v.append(vn)
            for i, (veh, vn) in enumerate(zip(vehs, new_v)):
                if veh.v == 0.0 and vn > 0.0:
                    veh.last_depart = t
                    if veh.stop_rec is not None:
                        queue_log.append(_close(veh.stop_rec, t))
                        veh.stop_rec = None
                elif veh.v > 0.0 and vn == 0.0:
                    veh.stop_rec = _open_stop(veh, i, t + 1, setback, lanes_ahead=vehs[:i])
                veh.v = vn
                veh.s += vn
                while veh.next_k <= veh.last_k and veh.s > veh.lane.crossings[veh.next_k][1] - setback + 1e-9:
                    veh.next_k += 1
            for veh in vehs:
                if veh.v == 0.0 and veh.next_k <= veh.last_k and veh.next_k > 0:
                    prev_center = lane.crossings[veh.next_k - 1][1]
                    if veh.s < prev_center:
                        raise SpillbackError(
                            f"queue on {lane.name} reached {lane.crossings[veh.next_k - 1][0]} at t={t + 1}"
                        )
            keep = []
            for veh in vehs:
                if veh.s >= veh.exit_s:
                    if veh.stop_rec is not None:
                        queue_log.append(_close(veh.stop_rec, None))
                    retire(veh)
                else:
                    keep.append(veh)
            lane.vehicles = keep

    for lane in lanes.values():
        for veh in lane.vehicles:
            if veh.stop_rec is not None:
                queue_log.append(_close(veh.stop_rec, None))
            retire(veh)

    finished.sort(key=lambda tr: tr.vehicle_id)
    queue_log.sort(key=lambda r: (r.vehicle_id, r.stop_start_s))
    plans = {si.geometry.intersection_id: si.plan for si in cfg.intersections}
    return finished, GroundTruth(plans, cfg.hours, tuple(queue_log))


def _open_stop(veh, index, t_stop, setback, lanes_ahead):
    lane = veh.lane
    if veh.next_k > veh.last_k:
        return None
    iid, cs, _, _ = lane.crossings[veh.next_k]
    ahead = sum(1 for o in lanes_ahead if o.next_k == veh.next_k and o.v == 0.0 and o.s <= cs - setback + 1e-9)
    return (veh.vid, iid, lane.direction, float(t_stop), ahead, abs(cs - veh.s))


def _close(rec, t_depart):
    vid, iid, direction, t_stop, ahead, dist = rec
    return QueueRecord(vid, iid, direction, t_stop, None if t_depart is None else float(t_depart), ahead, dist)


# -- convenience builders -----------------------------------------------------


def corridor_config(
    cycles: Sequence[int],
    ew_greens: Sequence[int] | None = None,
    offsets: Sequence[int] | None = None,
    spacing_m: float = 400.0,
    demand_vph: Mapping | float | Sequence[float] = 200.0,
    **kwargs,
) -> SimConfig:
    """Evenly spaced corridor of two-phase intersections named I0, I1, ...

    A scalar or hourly ``demand_vph`` applies to every approach; a mapping is
    passed through unchanged.
    """
    n = len(cycles)
    ew_greens = ew_greens or [c // 2 for c in cycles]
    offsets = offsets or [0] * n
    sims = []
    for i, (c, g, o) in enumerate(zip(cycles, ew_greens, offsets)):
        iid = f"I{i}"
        geom = IntersectionGeometry(iid, (i * spacing_m, 0.0))
        sims.append(SimIntersection(geom, two_phase_plan(iid, c, g, o), spacing_m))
    if not isinstance(demand_vph, Mapping):
        demand_vph = {(f"I{i}", d): demand_vph for i in range(n) for d in "NESW"}
    return SimConfig(tuple(sims), demand_vph, **kwargs)
