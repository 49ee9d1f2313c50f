"""Event-driven two-tier block cache simulation."""

from __future__ import annotations

import contextlib
import gc
import json
import math
import time as _time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from kvtrace import distfit
from kvtrace.cachesim.entries import DEVICE, GONE, HOST, BlockEntry, CostModel, TierConfig
from kvtrace.cachesim.policies import WACoefficients, make_policy
from kvtrace.trace.blocks import AccessLog, BlockedRequest, access_log, block_requests
from kvtrace.trace.hashing import DEFAULT_SEED
from kvtrace.trace.sessions import AS_RECORDED
from kvtrace.trace.types import TURN_CAP, RequestCategory, TraceRecord

SCHEMA_VERSION = 1
LIFE_SNAPSHOT = "snapshot"
LIFE_PER_EVICTION = "per_eviction"


class Workload:
    """A trace expanded into sim-blocks, plus lazily derived views."""

    def __init__(
        self,
        requests: list[BlockedRequest],
        sim_block_tokens: int = 16,
        decode_delay: float = 0.0,
        turn_cap: int = TURN_CAP,
    ):
        self.requests = requests
        self.sim_block_tokens = sim_block_tokens
        self.decode_delay = decode_delay
        self.turn_cap = turn_cap
        self._log: AccessLog | None = None
        self._next_ref: np.ndarray | None = None
        self._snaps: dict = {}

    @classmethod
    def from_records(
        cls,
        records: Sequence[TraceRecord],
        sim_block_tokens: int = 16,
        mode: str = AS_RECORDED,
        decode_delay: float = 0.0,
        seed: int = DEFAULT_SEED,
        turn_cap: int = TURN_CAP,
    ) -> "Workload":
        reqs = block_requests(records, sim_block_tokens, mode, seed, turn_cap)
        return cls(reqs, sim_block_tokens, decode_delay, turn_cap)

    @property
    def log(self) -> AccessLog:
        if self._log is None:
            self._log = access_log(self.requests, True, self.decode_delay)
        return self._log

    @property
    def input_blocks(self) -> int:
        return sum(len(r.input_keys) for r in self.requests)

    @property
    def footprint(self) -> int:
        """Distinct block keys touched by the trace."""
        return int(np.unique(self.log.key).size) if len(self.log) else 0

    def next_ref(self) -> np.ndarray:
        """For each access (in simulation order), the position of the next
        input reference to the same key, or +inf."""
        if self._next_ref is None:
            log = self.log
            n = len(log)
            nxt = np.full(n, np.inf)
            if n:
                order = np.lexsort((np.arange(n), log.key))
                skey = log.key[order]
                is_in = ~log.is_output[order]
                in_pos = np.flatnonzero(is_in)
                j = np.searchsorted(in_pos, np.arange(n), side="right")
                ok = j < in_pos.size
                cand = np.full(n, -1)
                cand[ok] = in_pos[j[ok]]
                same = ok.copy()
                same[ok] = skey[cand[ok]] == skey[ok]
                nxt[order[same]] = order[cand[same]]
            self._next_ref = nxt
        return self._next_ref

    def events(self) -> list:
        """(time, seq, request index, is_completion) in processing order."""
        ev = []
        d = self.decode_delay
        for i, r in enumerate(self.requests):
            ev.append((r.time, 2 * i, i, False))
            ev.append((r.time + d * r.output_tokens, 2 * i + 1, i, True))
        if d > 0:
            ev.sort()
        return ev

    def snapshots(self, window: float, refresh: float) -> list:
        key = (float(window), float(refresh))
        if key not in self._snaps:
            self._snaps[key] = list(distfit.refresh_fits(self.log, refresh, window))
        return self._snaps[key]


@dataclass
class SimReport:
    policy: str
    device_capacity_blocks: int
    host_capacity_blocks: int
    sim_block_tokens: int
    requests: int
    total_input_blocks: int
    device_hits: int
    host_hits: int
    misses: int
    output_blocks: int
    cost_total: float
    device_evictions: int
    host_evictions: int
    self_evictions: int
    per_category: dict = field(default_factory=dict)
    instances: int = 1
    per_instance_hits: list = field(default_factory=list)
    decision_time_us: dict | None = None
    schema_version: int = SCHEMA_VERSION
    victims: list | None = None  # (tier, key) per eviction when recorded

    @property
    def hits(self) -> int:
        return self.device_hits + self.host_hits

    @property
    def hit_ratio(self) -> float:
        return self.hits / self.total_input_blocks if self.total_input_blocks else 0.0

    @property
    def evictions(self) -> int:
        return self.device_evictions + self.host_evictions

    def to_dict(self) -> dict:
        d = {
            "schema_version": self.schema_version,
            "policy": self.policy,
            "device_capacity_blocks": self.device_capacity_blocks,
            "host_capacity_blocks": self.host_capacity_blocks,
            "sim_block_tokens": self.sim_block_tokens,
            "requests": self.requests,
            "total_input_blocks": self.total_input_blocks,
            "device_hits": self.device_hits,
            "host_hits": self.host_hits,
            "misses": self.misses,
            "hit_ratio": self.hit_ratio,
            "output_blocks": self.output_blocks,
            "cost_total": self.cost_total,
            "evictions": self.evictions,
            "device_evictions": self.device_evictions,
            "host_evictions": self.host_evictions,
            "self_evictions": self.self_evictions,
            "per_category": self.per_category,
            "instances": self.instances,
            "per_instance_hits": self.per_instance_hits,
        }
        if self.decision_time_us is not None:
            d["decision_time_us"] = self.decision_time_us
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


class _Tier:
    __slots__ = ("cap", "map", "policy", "level")

    def __init__(self, cap, policy, level):
        self.cap = cap
        self.map: dict = {}
        self.policy = policy
        self.level = level


class CacheState:
    """Device and host tiers with a demotion cascade.

    A block evicted from the device moves to the host; a block evicted from
    a full host (or from the device when there is no host) leaves the cache.
    """

    def __init__(self, tier: TierConfig, policy: str, cost: CostModel, n_categories: int, time_decisions=False):
        self.policy_name = policy
        self.dev = _Tier(tier.device_capacity_blocks, make_policy(policy, tier.device_capacity_blocks, cost.miss_cost), DEVICE)
        hcap = tier.host_capacity_blocks
        self.host = _Tier(hcap, make_policy(policy, max(hcap, 1), cost.miss_cost), HOST)
        self.seq = 0
        self.cur_req = -1
        self.device_hits = 0
        self.host_hits = 0
        self.misses = 0
        self.output_blocks = 0
        self.device_evictions = 0
        self.host_evictions = 0
        self.self_evictions = 0
        self.new_blocks = 0
        self.cat_hits = [0] * n_categories
        self.cat_misses = [0] * n_categories
        self.timings: list | None = [] if time_decisions else None
        self.before_evict = None  # hook for per-eviction life updates
        self.victims: list | None = None  # optional eviction trace
        self._plain = not time_decisions

    def resident(self, key) -> bool:
        return key in self.dev.map or key in self.host.map

    def prefix_length(self, keys: Sequence) -> int:
        dm, hm = self.dev.map, self.host.map
        n = 0
        for k in keys:
            if k in dm or k in hm:
                n += 1
            else:
                break
        return n

    def _pop(self, tier: _Tier, now: float) -> BlockEntry:
        if self.before_evict is not None:
            self.before_evict(tier, now)
        if self.timings is not None:
            t0 = _time.perf_counter_ns()
            v = tier.policy.pop_victim(now)
            self.timings.append(_time.perf_counter_ns() - t0)
        else:
            v = tier.policy.pop_victim(now)
        del tier.map[v.key]
        if v.last_req == self.cur_req:
            self.self_evictions += 1
        if self.victims is not None:
            self.victims.append((tier.level, v.key))
        return v

    def _insert_device(self, e: BlockEntry, now: float) -> None:
        dev = self.dev
        dmap = dev.map
        if len(dmap) >= dev.cap:
            if self._plain:
                v = dev.policy.pop_victim(now)
                del dmap[v.key]
                if v.last_req == self.cur_req:
                    self.self_evictions += 1
            else:
                v = self._pop(dev, now)
            self.device_evictions += 1
            host = self.host
            if host.cap > 0:
                hmap = host.map
                if len(hmap) >= host.cap:
                    if self._plain:
                        hv = host.policy.pop_victim(now)
                        del hmap[hv.key]
                        if hv.last_req == self.cur_req:
                            self.self_evictions += 1
                    else:
                        hv = self._pop(host, now)
                    hv.tier = GONE
                    self.host_evictions += 1
                hmap[v.key] = v
                v.tier = HOST
                host.policy.add(v, now)
            else:
                v.tier = GONE
        dmap[e.key] = e
        e.tier = DEVICE
        dev.policy.add(e, now)

    def refresh_hooks(self) -> None:
        """Recompute the no-hooks fast-path flag after changing hooks."""
        self._plain = self.before_evict is None and self.timings is None and self.victims is None

    def _run(self, keys, base, cat, rid, now, nref, pos, scan, prev=None):
        """Reference ``keys`` in order. With ``scan`` set, count the leading
        resident run as hits. Returns (device hits, host hits)."""
        self.cur_req = rid
        dmap = self.dev.map
        hmap = self.host.map
        dpol = self.dev.policy
        hpol = self.host.policy
        insert = self._insert_device
        dh = hh = 0
        off = base
        parent = prev
        for k in keys:
            nr = nref[pos] if nref is not None else 0.0
            pos += 1
            e = dmap.get(k)
            if e is not None:
                e.last_access = now
                e.frequency += 1
                e.category = cat
                e.last_req = rid
                e.next_ref = nr
                dpol.touch(e, now)
                if scan:
                    dh += 1
            else:
                e = hmap.pop(k, None)
                if e is not None:
                    hpol.remove(e)
                    e.last_access = now
                    e.frequency += 1
                    e.category = cat
                    e.last_req = rid
                    e.next_ref = nr
                    insert(e, now)
                    if scan:
                        hh += 1
                else:
                    scan = False
                    self.seq += 1
                    self.new_blocks += 1
                    e = BlockEntry(k, cat, off, now, self.seq, rid)
                    e.next_ref = nr
                    e.parent = parent
                    insert(e, now)
            off += 1
            parent = k
        return dh, hh

    def arrive(self, req: BlockedRequest, rid: int, now: float, nref, pos: int) -> tuple:
        """Process the input blocks of a request. Returns (hits_dev, hits_host, misses)."""
        cat = req.category
        dh, hh = self._run(req.input_keys, 0, cat, rid, now, nref, pos, True)
        miss = len(req.input_keys) - dh - hh
        self.device_hits += dh
        self.host_hits += hh
        self.misses += miss
        self.cat_hits[cat] += dh + hh
        self.cat_misses[cat] += miss
        return dh, hh, miss

    def complete(self, req: BlockedRequest, rid: int, now: float, nref, pos: int) -> None:
        """Insert (or touch) the output blocks of a finished request."""
        prev = req.input_keys[-1] if req.input_keys else None
        self._run(req.output_keys, len(req.input_keys), req.category, rid, now, nref, pos, False, prev)
        self.output_blocks += len(req.output_keys)

    def check_capacity(self) -> bool:
        return len(self.dev.map) <= self.dev.cap and len(self.host.map) <= max(self.host.cap, 0)


def _percentiles_us(ns: list) -> dict:
    if not ns:
        return {"count": 0}
    a = np.asarray(ns, dtype=np.float64) / 1000.0
    return {
        "count": int(a.size),
        "mean": float(a.mean()),
        "p50": float(np.percentile(a, 50)),
        "p90": float(np.percentile(a, 90)),
        "p99": float(np.percentile(a, 99)),
    }


class _WADriver:
    """Publishes fit snapshots to the WA policies as simulated time passes."""

    def __init__(self, states, snapshots, life_mode):
        self.states = states
        self.snaps = sorted(snapshots, key=lambda s: s.snapshot_time)
        self.idx = 0
        self.life_mode = life_mode
        self.current = distfit.empty_snapshot()
        self.base_new = [0] * len(states)
        for i, st in enumerate(states):
            self._apply(st)
            if life_mode == LIFE_PER_EVICTION:
                st.before_evict = self._make_hook(i, st)

    def _apply(self, st: CacheState) -> None:
        snap = self.current
        for tier in (st.dev, st.host):
            tier.policy.set_coefficients(WACoefficients(snap, snap.life(max(tier.cap, 1))))

    def _make_hook(self, i: int, st: CacheState):
        def hook(tier, now):
            snap = self.current
            elapsed = now - snap.snapshot_time
            fresh = st.new_blocks - self.base_new[i]
            rate = fresh / elapsed if elapsed > 0 and fresh > 0 else snap.block_rate
            life = max(tier.cap, 1) / rate if rate > 0 else math.inf
            tier.policy.set_coefficients(WACoefficients(snap, life))

        return hook

    def advance(self, now: float) -> None:
        changed = False
        while self.idx < len(self.snaps) and self.snaps[self.idx].snapshot_time <= now:
            self.current = self.snaps[self.idx]
            self.idx += 1
            changed = True
        if changed:
            for i, st in enumerate(self.states):
                self.base_new[i] = st.new_blocks
                self._apply(st)


def route_request(
    keys: Sequence,
    instances: Sequence[CacheState],
    outstanding: Sequence[float],
    routed: Sequence[int] | None = None,
) -> int:
    """Instance with the longest resident prefix; ties go to the least
    outstanding work, then the fewest blocks routed so far, then the lowest
    index. The ``routed`` counter spreads fresh prefixes when queues are idle."""
    best = 0
    best_k = None
    for i, st in enumerate(instances):
        k = (-st.prefix_length(keys), outstanding[i], routed[i] if routed is not None else 0, i)
        if best_k is None or k < best_k:
            best, best_k = i, k
    return best


def simulate(
    trace,
    tier: TierConfig,
    policy: str = "lru",
    cost: CostModel = CostModel(),
    fits: Iterable | None = None,
    fit_window: float = distfit.DEFAULT_WINDOW,
    fit_refresh: float = distfit.DEFAULT_REFRESH,
    life_mode: str = LIFE_SNAPSHOT,
    instances: int = 1,
    routing: str = "affinity",
    work_time: float = 1e-3,
    decode_delay: float = 0.0,
    time_decisions: bool = False,
    record_victims: bool = False,
) -> SimReport:
    """Replay a trace through the cache and count block hits.

    ``trace`` is a list of records or a prepared :class:`Workload`. WA uses
    ``fits`` (fit snapshots) when given, else snapshots fitted from the trace
    itself over a trailing ``fit_window`` every ``fit_refresh`` seconds; a
    snapshot only sees accesses before its publication time. ``work_time``
    converts cost units into seconds of instance busy time for routing.
    """
    with _gc_paused():
        return _simulate(
            trace, tier, policy, cost, fits, fit_window, fit_refresh, life_mode,
            instances, routing, work_time, decode_delay, time_decisions, record_victims,
        )


@contextlib.contextmanager
def _gc_paused():
    # cache entries form no reference cycles; cyclic collection passes over
    # millions of live entries only cost time
    was = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was:
            gc.enable()


def _simulate(
    trace, tier, policy, cost, fits, fit_window, fit_refresh, life_mode,
    instances, routing, work_time, decode_delay, time_decisions, record_victims,
) -> SimReport:
    if isinstance(trace, Workload):
        wl = trace
        if wl.sim_block_tokens != tier.sim_block_tokens:
            raise ValueError("workload was blocked with a different sim_block_tokens")
    else:
        wl = Workload.from_records(trace, tier.sim_block_tokens, decode_delay=decode_delay)
    policy = policy.lower().replace("-", "")
    if life_mode not in (LIFE_SNAPSHOT, LIFE_PER_EVICTION):
        raise ValueError(f"unknown life mode {life_mode!r}")
    if routing not in ("affinity", "round_robin"):
        raise ValueError(f"unknown routing {routing!r}")
    if instances < 1:
        raise ValueError("need at least one instance")

    ncat = 5 * wl.turn_cap
    if policy == "clairvoyant":
        if instances != 1:
            raise ValueError("the clairvoyant reference needs a single instance")
        single = TierConfig(tier.device_capacity_blocks + tier.host_capacity_blocks, 0, tier.sim_block_tokens)
        states = [CacheState(single, policy, cost, ncat, time_decisions)]
        nref = wl.next_ref().tolist()
    else:
        states = [CacheState(tier, policy, cost, ncat, time_decisions) for _ in range(instances)]
        nref = None
    if record_victims:
        for st in states:
            st.victims = []

    driver = None
    if policy == "wa":
        snaps = list(fits) if fits is not None else wl.snapshots(fit_window, fit_refresh)
        driver = _WADriver(states, snaps, life_mode)
    for st in states:
        st.refresh_hooks()

    reqs = wl.requests
    placed = [0] * len(reqs)
    busy = [0.0] * instances
    inst_hits = [0] * instances
    routed = [0] * instances
    rr = 0
    pos = 0
    hcost, mcost = cost.host_hit_cost, cost.miss_cost
    for now, _seq, i, done in wl.events():
        if driver is not None:
            driver.advance(now)
        r = reqs[i]
        if done:
            states[placed[i]].complete(r, i, now, nref, pos)
            pos += len(r.output_keys)
            continue
        if instances == 1:
            k = 0
        elif routing == "round_robin":
            k = rr
            rr = (rr + 1) % instances
        else:
            k = route_request(r.input_keys, states, [max(0.0, b - now) for b in busy], routed)
        placed[i] = k
        routed[k] += len(r.input_keys)
        dh, hh, miss = states[k].arrive(r, i, now, nref, pos)
        pos += len(r.input_keys)
        inst_hits[k] += dh + hh
        busy[k] = max(busy[k], now) + (hh * hcost + miss * mcost) * work_time

    per_cat = {}
    for c in range(ncat):
        h = sum(st.cat_hits[c] for st in states)
        m = sum(st.cat_misses[c] for st in states)
        if h or m:
            per_cat[RequestCategory.from_code(c, wl.turn_cap).label] = {"hits": h, "misses": m}
    dh = sum(st.device_hits for st in states)
    hh = sum(st.host_hits for st in states)
    ms = sum(st.misses for st in states)
    timings = None
    if time_decisions:
        timings = _percentiles_us([t for st in states for t in st.timings])
    rep = SimReport(
        policy=policy,
        device_capacity_blocks=tier.device_capacity_blocks,
        host_capacity_blocks=tier.host_capacity_blocks,
        sim_block_tokens=tier.sim_block_tokens,
        requests=len(reqs),
        total_input_blocks=dh + hh + ms,
        device_hits=dh,
        host_hits=hh,
        misses=ms,
        output_blocks=sum(st.output_blocks for st in states),
        cost_total=dh * cost.device_hit_cost + hh * hcost + ms * mcost,
        device_evictions=sum(st.device_evictions for st in states),
        host_evictions=sum(st.host_evictions for st in states),
        self_evictions=sum(st.self_evictions for st in states),
        per_category=per_cat,
        instances=instances,
        per_instance_hits=inst_hits,
        decision_time_us=timings,
    )
    if record_victims:
        rep.victims = [v for st in states for v in st.victims]
    return rep


def ideal_policy_reference(trace, capacity: int, sim_block_tokens: int = 16) -> SimReport:
    """Clairvoyant upper bound: evict the block re-referenced farthest ahead
    (never-again blocks first, deepest prefix first among ties)."""
    return simulate(trace, TierConfig(capacity, 0, sim_block_tokens), "clairvoyant")
