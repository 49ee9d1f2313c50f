import math

import numpy as np
import pytest
from scipy import integrate

from kvtrace import distfit
from kvtrace.distfit import (
    LAMBDA_MAX,
    POOLED,
    CategoryFit,
    UnfittedCategoryError,
    collect_samples,
    fit_exponential,
    fit_stability_report,
    ks_distance,
    refresh_fits,
    reuse_probability,
    stability_windows,
)
from kvtrace.trace.blocks import AccessLog

TEXT1, TEXT5 = 0, 4  # category codes for text turn buckets 1 and 5


def make_log(events):
    """AccessLog from (time, key, category) tuples, previous-access links
    computed with a plain dict."""
    events = sorted(events, key=lambda e: e[0])
    n = len(events)
    last = {}
    prev = np.full(n, -1, dtype=np.int64)
    gap = np.full(n, np.nan)
    for i, (t, k, _) in enumerate(events):
        if k in last:
            prev[i] = last[k]
            gap[i] = t - events[last[k]][0]
        last[k] = i
    return AccessLog(
        time=np.array([e[0] for e in events], dtype=np.float64),
        key=np.array([e[1] for e in events], dtype=np.uint64),
        category=np.array([e[2] for e in events], dtype=np.int64),
        offset=np.zeros(n, dtype=np.int64),
        request=np.arange(n),
        is_output=np.zeros(n, dtype=bool),
        prev=prev,
        gap=gap,
    )


def exp_pairs(rng, lam, n, rate=10.0, t0=0.0, key0=0, cat=TEXT1):
    """n keys born as a Poisson stream, each reused once after Exp(lam)."""
    births = t0 + np.cumsum(rng.exponential(1 / rate, n))
    gaps = rng.exponential(1 / lam, n)
    ev = []
    for i, (b, g) in enumerate(zip(births, gaps)):
        ev.append((float(b), key0 + i, cat))
        ev.append((float(b + g), key0 + i, cat))
    return ev


# --------------------------------------------------------------- sampling


def test_single_reuse_sample():
    ss = collect_samples(make_log([(0.0, 1, TEXT1), (5.0, 1, TEXT1)]), 0, 10)
    assert list(ss.interval) == [5.0]
    assert ss.totals == {TEXT1: 1} and ss.reused == {TEXT1: 1}
    (s,) = ss.samples()
    assert s.category.label == "text-1" and s.interval == 5.0 and s.observed_at == 5.0


def test_single_access_counts_in_totals_only():
    ss = collect_samples(make_log([(0.0, 1, TEXT1), (1.0, 2, TEXT1), (2.0, 1, TEXT1)]), 0, 10)
    assert ss.totals[TEXT1] == 2 and ss.reused[TEXT1] == 1 and len(ss) == 1


def test_sample_attributed_to_earlier_category():
    ss = collect_samples(make_log([(0.0, 1, TEXT1), (3.0, 1, TEXT5)]), 0, 10)
    assert list(ss.category) == [TEXT1]
    assert ss.reused == {TEXT1: 1, TEXT5: 0}


def test_window_excludes_earlier_access():
    log = make_log([(0.0, 1, TEXT1), (5.0, 1, TEXT1), (6.0, 1, TEXT1)])
    ss = collect_samples(log, 1.0, 10.0)
    assert list(ss.interval) == [1.0]
    assert ss.new_blocks == 1


def test_empty_window():
    ss = collect_samples(make_log([(0.0, 1, TEXT1)]), 5, 10)
    assert len(ss) == 0 and ss.totals == {}


def test_sample_mean_recovers_exp_gap():
    rng = np.random.default_rng(0)
    log = make_log(exp_pairs(rng, 0.2, 10_000))
    ss = collect_samples(log, 0, math.inf)
    assert len(ss) == 10_000
    assert ss.interval.mean() == pytest.approx(5.0, rel=0.05)


# ---------------------------------------------------------------- fitting


def test_fit_constant_samples():
    fit = fit_exponential([2.0] * 40, 100, 80)
    assert fit.lam == 0.5 and fit.p == 0.8 and fit.fitted and fit.sample_count == 40


def test_fit_insufficient_samples_unfitted():
    fit = fit_exponential([1.0] * 29, 10, 5)
    assert not fit.fitted and math.isnan(fit.lam) and fit.p == 0.5
    with pytest.raises(UnfittedCategoryError):
        reuse_probability(fit, 0, 1)


def test_fit_all_zero_capped():
    assert fit_exponential([0.0] * 50, 10, 10).lam == LAMBDA_MAX


@pytest.mark.parametrize("lam", [0.01, 0.1, 1.0])
def test_fit_recovers_lambda(lam):
    x = np.random.default_rng(42).exponential(1 / lam, 10_000)
    assert fit_exponential(x, 1, 1).lam == pytest.approx(lam, rel=0.05)


# ------------------------------------------------------------ probability


def _fit(lam, p):
    return CategoryFit(POOLED, lam, p, (0, 1), 100)


def test_reuse_probability_full_mass():
    assert reuse_probability(_fit(0.1, 0.8), 0, 500) == pytest.approx(0.8, rel=1e-12)


def test_reuse_probability_half_life():
    assert reuse_probability(_fit(0.1, 1.0), 0, math.log(2) / 0.1) == pytest.approx(0.5, rel=1e-12)


def test_reuse_probability_direct_value():
    fit = _fit(0.1, 0.8)
    got = reuse_probability(fit, 10, 20)
    assert got == pytest.approx(0.8 * (math.exp(-1) - math.exp(-3)), rel=1e-12)
    assert got == pytest.approx(0.2545, abs=5e-5)
    dens, _ = integrate.quad(lambda s: 0.8 * 0.1 * math.exp(-0.1 * s), 10, 30)
    assert got == pytest.approx(dens, rel=1e-9)


def test_reuse_probability_monotone_and_bounded():
    fit = _fit(0.05, 0.7)
    vals = [reuse_probability(fit, t, 60) for t in np.linspace(0, 200, 101)]
    assert all(0 <= v <= 0.7 for v in vals)
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_log_reuse_probability_matches():
    fit = _fit(0.05, 0.7)
    for t in (0.0, 3.0, 50.0):
        assert math.exp(distfit.log_reuse_probability(fit, t, 60)) == pytest.approx(
            reuse_probability(fit, t, 60), rel=1e-12
        )
    # far tail: probability underflows but the log stays finite
    assert distfit.log_reuse_probability(fit, 1e6, 60) > -math.inf


def test_reuse_probability_rejects_bad_args():
    with pytest.raises(ValueError):
        reuse_probability(_fit(0.1, 1), -1, 1)
    with pytest.raises(ValueError):
        reuse_probability(_fit(0.1, 1), 0, 0)


# ---------------------------------------------------------------- refresh


def test_refresh_covers_span_and_is_immutable():
    rng = np.random.default_rng(1)
    log = make_log(exp_pairs(rng, 0.2, 2000, rate=2.0))
    snaps = list(refresh_fits(log, 100.0, 300.0))
    t0, t1 = log.time[0], log.time[-1]
    times = [s.snapshot_time for s in snaps]
    assert times[0] == t0 and times[-1] > t1 and times[-2] <= t1
    assert np.allclose(np.diff(times), 100.0)
    with pytest.raises(TypeError):
        snaps[1].fits[TEXT1] = None
    with pytest.raises(AttributeError):
        snaps[1].block_rate = 0.0


def test_first_snapshot_empty_unfitted():
    log = make_log(exp_pairs(np.random.default_rng(0), 1.0, 50))
    first = next(refresh_fits(log, 10.0, 60.0))
    assert first.fits == {} and not first.pooled.fitted
    assert first.get(TEXT1) is None


def test_constant_rate_snapshots_stable():
    rng = np.random.default_rng(2)
    log = make_log(exp_pairs(rng, 0.2, 40_000, rate=10.0))
    snaps = list(refresh_fits(log, 600.0, 1800.0))
    lams = [s.get(TEXT1).lam for s in snaps if s.snapshot_time >= log.time[0] + 1800 and s.get(TEXT1)]
    assert len(lams) >= 3
    for a, b in zip(lams, lams[1:]):
        assert abs(a - b) / a < 0.10


def test_two_phase_switch_tracked():
    rng = np.random.default_rng(3)
    T, window = 2000.0, 600.0
    ev = exp_pairs(rng, 0.1, 19_000, rate=10.0)
    ev += exp_pairs(rng, 0.4, 20_000, rate=10.0, t0=T, key0=10**6)
    log = make_log(ev)
    snaps = [s for s in refresh_fits(log, 300.0, window) if T + window + 60 <= s.snapshot_time <= T + 1500]
    assert snaps
    for s in snaps:
        assert s.get(TEXT1).lam == pytest.approx(0.4, rel=0.05)


def test_life_from_block_rate():
    snap = distfit.FitSnapshot(0.0, (0, 1), block_rate=4.0)
    assert snap.life(100) == 25.0
    assert distfit.empty_snapshot().life(100) == math.inf


# -------------------------------------------------------------- stability


def test_ks_identical_zero():
    x = np.random.default_rng(0).exponential(10, 500)
    assert ks_distance(x, x) == 0.0


def test_ks_same_distribution_below_critical():
    rng = np.random.default_rng(5)
    crit = 1.358 * math.sqrt(2 / 1000)
    assert ks_distance(rng.exponential(10, 1000), rng.exponential(10, 1000)) < crit


def test_ks_different_distributions_above_critical():
    rng = np.random.default_rng(6)
    crit = 1.358 * math.sqrt(2 / 1000)
    assert ks_distance(rng.exponential(10, 1000), rng.exponential(2.5, 1000)) > crit


def test_stability_report_two_days():
    rng = np.random.default_rng(7)
    day = 86400.0
    ev = exp_pairs(rng, 0.2, 3000, rate=2.0, t0=9 * 3600)
    ev += exp_pairs(rng, 0.2, 3000, rate=2.0, t0=day + 9 * 3600, key0=10**6)
    log = make_log(ev)
    pairs = stability_windows([0.0, day], [9, 20])
    assert pairs[0] == ((9 * 3600.0, 10 * 3600.0), (day + 9 * 3600.0, day + 10 * 3600.0))
    rows = fit_stability_report(log, pairs)
    r9 = [r for r in rows if r.window_a[0] == 9 * 3600.0]
    assert len(r9) == 1 and r9[0].category == "text-1"
    assert r9[0].ks < 1.358 * math.sqrt(2 / 1000)
    assert abs(r9[0].lambda_diff) < 0.02
    # evening windows hold no samples: no row, or a row marked absent
    assert all(r.ks is None for r in rows if r.window_a[0] == 20 * 3600.0)
