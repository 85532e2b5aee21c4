"""Model inputs: KDE/FFT periodicity features and stop-time quantile vectors."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import DomainError, StopEvent
from .sim import GroundTruth, stream_seed

KDE_BANDWIDTH_S = 6.0
WINDOW_S = 3600
FFT_SIZE = 4096
MAX_FOURIER = 30
QUANTILE_GRID = np.round(np.arange(1, 101) / 100.0, 2)
SAMPLES_PER_GROUPING = 50
REPETITIONS = 40


@dataclass(frozen=True)
class CycleSample:
    intersection_id: str
    phase_key: tuple[str, str]
    window_hour: int
    n_starts: int
    features: tuple[float, ...]
    target_cycle_s: float


@dataclass(frozen=True)
class RedSample:
    intersection_id: str
    direction: str
    tod_bin: str
    quantiles: tuple[float, ...]
    target_red_s: float
    repetition: int = 0


@dataclass(frozen=True)
class ScalerParams:
    mean: np.ndarray
    std: np.ndarray


# -- cycle length features ----------------------------------------------------


def bin_accel_starts(events: Iterable[StopEvent], ground_truth: GroundTruth) -> dict:
    """Group acceleration starts by (intersection, phase key, absolute hour).

    Values are ``(sorted start times, target cycle)``.
    """
    starts = defaultdict(list)
    for ev in events:
        hour = int(math.floor(ev.accel_start_s / WINDOW_S))
        starts[(ev.intersection_id, ev.phase_key, hour)].append(ev.accel_start_s)
    out = {}
    for key in sorted(starts):
        iid, _, hour = key
        if not ground_truth.covers(iid, hour):
            raise DomainError(f"no ground truth for bin {key}")
        out[key] = (sorted(starts[key]), ground_truth.cycle(iid, hour))
    return out


def kde_density(starts_rel: Sequence[float], bandwidth_s: float = KDE_BANDWIDTH_S, n_grid: int = WINDOW_S) -> np.ndarray:
    """Gaussian KDE of the start times on the 1 Hz grid 0..n_grid-1."""
    s = np.asarray(starts_rel, dtype=np.float64)
    if len(s) < 2:
        raise DomainError("KDE needs at least two starts")
    grid = np.arange(n_grid, dtype=np.float64)
    z = (grid[:, None] - s[None, :]) / bandwidth_s
    return np.exp(-0.5 * z * z).sum(axis=1) / (len(s) * bandwidth_s * math.sqrt(2 * math.pi))


def fourier_spectrum(density: np.ndarray, n_fft: int = FFT_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Positive-frequency bins (Hz) and amplitudes of the density.

    The density is mean-removed and Hann-tapered before zero padding; without
    the taper a period falling between two bins loses up to a third of its
    amplitude and its on-bin second harmonic can outrank it.
    """
    d = np.asarray(density, dtype=np.float64)
    d = (d - d.mean()) * np.hanning(len(d))
    amp = np.abs(np.fft.rfft(d, n=n_fft))[1:]
    freqs = np.arange(1, len(amp) + 1) / n_fft
    return freqs, amp


def top_fourier_frequencies(density: np.ndarray, k: int, n_fft: int = FFT_SIZE) -> np.ndarray:
    """The ``k`` strongest positive frequencies, strongest first.

    Equal amplitudes are ordered by frequency. Amplitudes within 1e-12 of
    the spectrum's peak-relative scale count as equal, so that a flat input
    ranks deterministically.
    """
    if k < 1:
        raise DomainError("k must be at least 1")
    freqs, amp = fourier_spectrum(density, n_fft)
    scale = max(float(np.abs(np.asarray(density)).sum()), 1e-300)
    key = np.round(amp / scale, 12)
    order = np.lexsort((freqs, -key))
    return freqs[order[:k]]


def window_features(starts: Sequence[float], k: int = MAX_FOURIER, bandwidth_s: float = KDE_BANDWIDTH_S) -> np.ndarray:
    s = np.asarray(starts, dtype=np.float64)
    return top_fourier_frequencies(kde_density(s - s.min(), bandwidth_s), k)


def build_cycle_dataset(
    bins: Mapping,
    k: int = MAX_FOURIER,
    min_starts: int = 2,
    bandwidth_s: float = KDE_BANDWIDTH_S,
) -> list[CycleSample]:
    out = []
    for key in sorted(bins):
        starts, target = bins[key]
        n = len(starts)
        if n < 2 or (min_starts >= 2 and n <= min_starts):
            continue
        iid, phase_key, hour = key
        feats = window_features(starts, k, bandwidth_s)
        out.append(CycleSample(iid, tuple(phase_key), hour, n, tuple(float(f) for f in feats), float(target)))
    return out


def truncate_features(samples: Sequence[CycleSample], k: int) -> np.ndarray:
    """Feature matrix using the first ``k`` ranked frequencies."""
    return np.array([s.features[:k] for s in samples], dtype=np.float64).reshape(len(samples), k)


# -- red time features --------------------------------------------------------


def empirical_quantile(stops: Sequence[float], alpha: float) -> float:
    """Largest stop whose empirical CDF value is strictly below ``alpha``.

    ``alpha == 1`` returns the maximum; when no stop qualifies the minimum is
    returned.
    """
    s = np.sort(np.asarray(stops, dtype=np.float64))
    n = len(s)
    if n == 0:
        raise DomainError("empty stop sample")
    if not 0 < alpha <= 1:
        raise DomainError("alpha must lie in (0, 1]")
    if alpha >= 1.0:
        return float(s[-1])
    # for sorted s, #{s_j <= s_i} is the right insertion index. Comparing
    # count/n with alpha (not count with alpha*n) keeps exact ties exact:
    # 0.3 * 10 rounds above 3, while 3 / 10 == 0.3.
    counts = np.searchsorted(s, s, side="right")
    ok = counts / n < alpha
    if not ok.any():
        return float(s[0])
    return float(s[ok].max())


def quantile_vector(stops: Sequence[float], grid: np.ndarray = QUANTILE_GRID) -> np.ndarray:
    s = np.sort(np.asarray(stops, dtype=np.float64))
    n = len(s)
    if n == 0:
        raise DomainError("empty stop sample")
    counts = np.searchsorted(s, s, side="right")
    out = np.empty(len(grid))
    for i, alpha in enumerate(grid):
        if alpha >= 1.0:
            out[i] = s[-1]
            continue
        ok = counts / n < alpha
        out[i] = s[ok].max() if ok.any() else s[0]
    return out


def group_stop_events(events: Iterable[StopEvent]) -> dict:
    """(intersection, direction, time-of-day bin) -> list of events."""
    groups = defaultdict(list)
    for ev in events:
        groups[(ev.intersection_id, ev.direction, ev.tod_bin)].append(ev)
    return {k: groups[k] for k in sorted(groups)}


def red_target(group_events: Sequence[StopEvent], ground_truth: GroundTruth, key) -> float:
    iid, direction, _ = key
    movements = {ev.movement for ev in group_events}
    movement = movements.pop() if len(movements) == 1 else "through"
    hours = sorted({int(ev.stop_start_s // 3600) for ev in group_events})
    try:
        reds = {ground_truth.red(iid, (direction, movement), h) for h in hours}
    except KeyError as exc:
        raise DomainError(f"no ground-truth phase for red bin {key}") from exc
    if len(reds) != 1:
        raise DomainError(f"red time changes within bin {key}: {sorted(reds)}")
    return float(reds.pop())


def build_red_dataset(
    groups: Mapping,
    ground_truth: GroundTruth,
    samples_per_grouping: int = SAMPLES_PER_GROUPING,
    repetitions: int = REPETITIONS,
    seed: int = 0,
) -> list[RedSample]:
    out = []
    for key in sorted(groups):
        evs = groups[key]
        if not evs:
            raise DomainError(f"empty red bin {key}")
        target = red_target(evs, ground_truth, key)
        stops = np.array([ev.stop_duration_s for ev in evs])
        rng = np.random.default_rng(stream_seed(seed, "red", *key))
        for r in range(repetitions):
            draw = stops[rng.integers(0, len(stops), size=samples_per_grouping)]
            q = quantile_vector(draw)
            out.append(RedSample(key[0], key[1], key[2], tuple(float(x) for x in q), target, r))
    return out


# -- scaling ------------------------------------------------------------------


def fit_scaler(X) -> ScalerParams:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise DomainError("scaler needs a non-empty 2-D matrix")
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return ScalerParams(mu, sd)


def apply_scaler(params: ScalerParams, X) -> np.ndarray:
    return (np.asarray(X, dtype=np.float64) - params.mean) / params.std


def invert_scaler(params: ScalerParams, Z) -> np.ndarray:
    return np.asarray(Z, dtype=np.float64) * params.std + params.mean
