"""Per-category exponential reuse-interval fits over sliding windows.

A reuse sample is the gap between two consecutive accesses to the same
block key. It is attributed to the category of the earlier access, since
that is the category a cached block carries while it waits for reuse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterator, Mapping, Sequence

import numpy as np
from scipy import stats

from kvtrace.trace.blocks import AccessLog
from kvtrace.trace.types import TURN_CAP, RequestCategory

MIN_SAMPLES = 30
LAMBDA_MAX = 1e6
DEFAULT_REFRESH = 600.0
DEFAULT_WINDOW = 3600.0
POOLED = -1  # category code of the all-categories fit


class UnfittedCategoryError(LookupError):
    """Raised when a probability is requested from an unfitted category."""


@dataclass(frozen=True)
class ReuseSample:
    category: RequestCategory
    interval: float
    observed_at: float


@dataclass(frozen=True)
class CategoryFit:
    category: int  # category code, POOLED for the all-categories fit
    lam: float
    p: float
    window: tuple
    sample_count: int
    total_blocks: int = 0
    reused_blocks: int = 0
    fitted: bool = True

    def label(self, turn_cap: int = TURN_CAP) -> str:
        if self.category == POOLED:
            return "all"
        return RequestCategory.from_code(self.category, turn_cap).label

    def to_dict(self, turn_cap: int = TURN_CAP) -> dict:
        return {
            "category": self.label(turn_cap),
            "lambda": self.lam if self.fitted else None,
            "p": self.p,
            "sample_count": self.sample_count,
            "total_blocks": self.total_blocks,
            "reused_blocks": self.reused_blocks,
            "fitted": self.fitted,
            "window": list(self.window),
        }


@dataclass
class SampleSet:
    """Reuse samples from one window, as parallel arrays."""

    window: tuple
    interval: np.ndarray
    category: np.ndarray  # category code of the earlier access
    observed_at: np.ndarray
    totals: dict  # category code -> distinct keys accessed
    reused: dict  # category code -> distinct keys with a sample
    new_blocks: int = 0  # accesses whose key is first seen in the window
    pooled_total: int = 0
    pooled_reused: int = 0

    def __len__(self) -> int:
        return len(self.interval)

    def for_category(self, code: int) -> np.ndarray:
        return self.interval[self.category == code]

    def samples(self, turn_cap: int = TURN_CAP) -> list[ReuseSample]:
        return [
            ReuseSample(RequestCategory.from_code(int(c), turn_cap), float(i), float(t))
            for i, c, t in zip(self.interval, self.category, self.observed_at)
        ]


def collect_samples(log: AccessLog, start: float, end: float) -> SampleSet:
    """Reuse samples for accesses in ``[start, end)`` whose previous access is too."""
    sl = log.window(start, end)
    lo = sl.start
    keys = log.key[sl]
    cats = log.category[sl]
    prev = log.prev[sl]
    repeat = prev >= lo
    prev_idx = prev[repeat]
    s_cat = log.category[prev_idx]
    s_key = log.key[prev_idx]
    totals, reused = {}, {}
    for c in np.unique(cats).tolist():
        totals[c] = int(np.unique(keys[cats == c]).size)
        hit = s_key[s_cat == c]
        reused[c] = int(np.unique(hit).size) if hit.size else 0
    return SampleSet(
        window=(float(start), float(end)),
        interval=log.gap[sl][repeat],
        category=s_cat,
        observed_at=log.time[sl][repeat],
        totals=totals,
        reused=reused,
        new_blocks=int((~repeat).sum()),
        pooled_total=int(np.unique(keys).size),
        pooled_reused=int(np.unique(s_key).size),
    )


def fit_exponential(
    intervals: Sequence[float],
    total_blocks: int,
    reused_blocks: int,
    category: int = POOLED,
    window: tuple = (0.0, 0.0),
    min_samples: int = MIN_SAMPLES,
) -> CategoryFit:
    """Maximum-likelihood exponential fit plus the per-block reuse fraction."""
    x = np.asarray(intervals, dtype=np.float64)
    n = int(x.size)
    p = reused_blocks / total_blocks if total_blocks > 0 else 0.0
    p = min(max(p, 0.0), 1.0)
    if n < min_samples:
        return CategoryFit(category, math.nan, p, tuple(window), n, total_blocks, reused_blocks, fitted=False)
    mean = float(x.mean())
    lam = LAMBDA_MAX if mean <= 1.0 / LAMBDA_MAX else 1.0 / mean
    return CategoryFit(category, lam, p, tuple(window), n, total_blocks, reused_blocks)


def reuse_probability(fit: CategoryFit, t: float, life: float) -> float:
    """Probability of reuse in ``(t, t + life]`` after the last access."""
    if not fit.fitted:
        raise UnfittedCategoryError(f"category {fit.label()} has no fit")
    if t < 0 or not life > 0:
        raise ValueError("need t >= 0 and life > 0")
    return fit.p * math.exp(-fit.lam * t) * -math.expm1(-fit.lam * life)


def log_reuse_probability(fit: CategoryFit, t: float, life: float) -> float:
    """``log(reuse_probability)`` without underflow for large ``lam * t``."""
    if not fit.fitted:
        raise UnfittedCategoryError(f"category {fit.label()} has no fit")
    if t < 0 or not life > 0:
        raise ValueError("need t >= 0 and life > 0")
    if fit.p <= 0:
        return -math.inf
    return math.log(fit.p) + math.log(-math.expm1(-fit.lam * life)) - fit.lam * t


@dataclass(frozen=True)
class FitSnapshot:
    """Immutable set of fits published at ``snapshot_time``.

    ``block_rate`` is the rate (blocks/second) at which keys not seen
    earlier in the window arrived; it sets the default life horizon.
    """

    snapshot_time: float
    window: tuple
    fits: Mapping = field(default_factory=lambda: MappingProxyType({}))
    pooled: CategoryFit = None
    block_rate: float = 0.0

    def get(self, code: int) -> CategoryFit | None:
        fit = self.fits.get(code)
        return fit if fit is not None and fit.fitted else None

    def life(self, capacity_blocks: float) -> float:
        return capacity_blocks / self.block_rate if self.block_rate > 0 else math.inf

    def to_dict(self, turn_cap: int = TURN_CAP) -> dict:
        return {
            "snapshot_time": self.snapshot_time,
            "window": list(self.window),
            "block_rate": self.block_rate,
            "pooled": self.pooled.to_dict(turn_cap) if self.pooled else None,
            "categories": [self.fits[c].to_dict(turn_cap) for c in sorted(self.fits)],
        }


def snapshot_from_samples(
    ss: SampleSet, snapshot_time: float, min_samples: int = MIN_SAMPLES, span: float | None = None
) -> FitSnapshot:
    fits = {}
    for c in sorted(ss.totals):
        fits[c] = fit_exponential(ss.for_category(c), ss.totals[c], ss.reused[c], c, ss.window, min_samples)
    pooled = fit_exponential(ss.interval, ss.pooled_total, ss.pooled_reused, POOLED, ss.window, min_samples)
    if span is None:
        span = ss.window[1] - ss.window[0]
    rate = ss.new_blocks / span if span > 0 else 0.0
    return FitSnapshot(float(snapshot_time), ss.window, MappingProxyType(fits), pooled, rate)


def empty_snapshot(snapshot_time: float = 0.0) -> FitSnapshot:
    w = (float(snapshot_time), float(snapshot_time))
    pooled = CategoryFit(POOLED, math.nan, 0.0, w, 0, fitted=False)
    return FitSnapshot(float(snapshot_time), w, MappingProxyType({}), pooled, 0.0)


def refresh_fits(
    log: AccessLog,
    refresh: float = DEFAULT_REFRESH,
    window: float = DEFAULT_WINDOW,
    start: float | None = None,
    end: float | None = None,
    min_samples: int = MIN_SAMPLES,
) -> Iterator[FitSnapshot]:
    """Snapshots at ``start + k * refresh`` over the trailing ``window``.

    The first snapshot sits at ``start`` (empty window); the last is the first
    boundary past the final access, so the sequence covers the whole span.
    The rate used for the life horizon divides by the part of the window
    that overlaps the trace, so early snapshots are not diluted.
    """
    if refresh <= 0 or window <= 0:
        raise ValueError("refresh and window must be positive")
    if len(log) == 0 and (start is None or end is None):
        return
    t0 = float(log.time[0]) if start is None else float(start)
    t1 = float(log.time[-1]) if end is None else float(end)
    k = 0
    while True:
        at = t0 + k * refresh
        lo = max(at - window, t0)
        ss = collect_samples(log, at - window, at)
        yield snapshot_from_samples(ss, at, min_samples, span=at - lo)
        if at > t1:
            break
        k += 1


@dataclass(frozen=True)
class StabilityRow:
    category: str
    window_a: tuple
    window_b: tuple
    ks: float | None  # None when either window has no samples
    lambda_a: float | None
    lambda_b: float | None
    n_a: int
    n_b: int

    @property
    def lambda_diff(self) -> float | None:
        if self.lambda_a is None or self.lambda_b is None:
            return None
        return self.lambda_b - self.lambda_a


def ks_distance(a: Sequence[float], b: Sequence[float]) -> float:
    return float(stats.ks_2samp(a, b).statistic)


def stability_windows(day_starts: Sequence[float], hours: Sequence[int], length: float = 3600.0) -> list:
    """Same hour-of-day windows on consecutive days, as (window_a, window_b) pairs."""
    pairs = []
    for d0, d1 in zip(day_starts, day_starts[1:]):
        for h in hours:
            pairs.append(((d0 + h * 3600.0, d0 + h * 3600.0 + length), (d1 + h * 3600.0, d1 + h * 3600.0 + length)))
    return pairs


def fit_stability_report(
    log: AccessLog, window_pairs: Sequence, min_samples: int = MIN_SAMPLES, turn_cap: int = TURN_CAP
) -> list[StabilityRow]:
    """KS distance and fitted-rate difference per category and window pair."""
    rows = []
    for wa, wb in window_pairs:
        sa = collect_samples(log, *wa)
        sb = collect_samples(log, *wb)
        codes = sorted(set(sa.totals) | set(sb.totals))
        for c in codes:
            xa, xb = sa.for_category(c), sb.for_category(c)
            fa = fit_exponential(xa, sa.totals.get(c, 0), sa.reused.get(c, 0), c, wa, min_samples)
            fb = fit_exponential(xb, sb.totals.get(c, 0), sb.reused.get(c, 0), c, wb, min_samples)
            ks = ks_distance(xa, xb) if xa.size and xb.size else None
            rows.append(
                StabilityRow(
                    RequestCategory.from_code(c, turn_cap).label,
                    tuple(wa),
                    tuple(wb),
                    ks,
                    fa.lam if fa.fitted else None,
                    fb.lam if fb.fitted else None,
                    int(xa.size),
                    int(xb.size),
                )
            )
    return rows
