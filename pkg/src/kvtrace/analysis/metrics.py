"""Workload characterizations over a parsed trace.

All hit metrics assume an infinite cache: an input block is a hit when its
prefix key was produced (as input or, by default, output) by any earlier
request. Blocks are the trace's native 4-token groups unless a coarser
``block_tokens`` is requested.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from kvtrace import distfit
from kvtrace.analysis.tables import Curve, DistributionTable, HeatmapTable, lorenz
from kvtrace.trace.blocks import AccessLog, access_log, block_requests
from kvtrace.trace.profiles import normalized_hbm_fraction
from kvtrace.trace.sessions import AS_RECORDED, link_sessions
from kvtrace.trace.types import GROUP_TOKENS, TURN_CAP, ModelProfile, RequestCategory, RequestType, TraceRecord


class TraceView:
    """A trace with its sessions, blocked requests and access log, computed once."""

    def __init__(
        self,
        records: Sequence[TraceRecord],
        block_tokens: int = GROUP_TOKENS,
        mode: str = AS_RECORDED,
        include_outputs: bool = True,
        turn_cap: int = TURN_CAP,
    ):
        self.records = list(records)
        self.block_tokens = block_tokens
        self.include_outputs = include_outputs
        self.turn_cap = turn_cap
        self.sessions, self.turns = link_sessions(self.records)
        self.blocked = block_requests(self.records, block_tokens, mode, turn_cap=turn_cap)
        self.log: AccessLog = access_log(self.blocked, include_outputs)
        # per-request attributes in processing order
        self.req_user = np.array([b.user for b in self.blocked], dtype=object)
        self.req_cat = np.array([b.category for b in self.blocked], dtype=np.int64)
        self.req_turn = np.array([b.turn for b in self.blocked], dtype=np.int64)
        self.req_type = self.req_cat // turn_cap
        self._hit = None

    @property
    def hit_mask(self) -> np.ndarray:
        """Per access: input block whose key appeared in an earlier request."""
        if self._hit is None:
            log = self.log
            prev = log.prev
            ok = prev >= 0
            same = np.zeros(len(log), dtype=bool)
            same[ok] = log.request[prev[ok]] == log.request[ok]
            self._hit = ok & ~same & ~log.is_output
        return self._hit

    @property
    def input_mask(self) -> np.ndarray:
        return ~self.log.is_output


def _view(trace, **kw) -> TraceView:
    return trace if isinstance(trace, TraceView) else TraceView(trace, **kw)


# ---------------------------------------------------------------- hit ratio


@dataclass
class HitAccounting:
    total_blocks: int
    hit_blocks: int
    per_request_hits: np.ndarray  # processing order
    per_request_blocks: np.ndarray
    per_user: dict = field(default_factory=dict)  # user -> (hits, blocks)
    per_category: dict = field(default_factory=dict)  # label -> (hits, blocks)

    @property
    def ratio(self) -> float:
        return self.hit_blocks / self.total_blocks if self.total_blocks else 0.0

    def to_dict(self) -> dict:
        return {
            "hit_ratio": self.ratio,
            "hit_blocks": self.hit_blocks,
            "total_blocks": self.total_blocks,
            "per_category": {k: {"hits": h, "blocks": b} for k, (h, b) in sorted(self.per_category.items())},
        }


def ideal_hit_ratio(trace, **kw) -> HitAccounting:
    v = _view(trace, **kw)
    log = v.log
    n_req = len(v.blocked)
    inp = v.input_mask
    hits = np.bincount(log.request[v.hit_mask], minlength=n_req)
    blocks = np.bincount(log.request[inp], minlength=n_req)
    per_user: dict = {}
    for u, h, b in zip(v.req_user, hits.tolist(), blocks.tolist()):
        ph, pb = per_user.get(u, (0, 0))
        per_user[u] = (ph + h, pb + b)
    per_cat = {}
    ch = np.bincount(v.req_cat, weights=hits, minlength=5 * v.turn_cap)
    cb = np.bincount(v.req_cat, weights=blocks, minlength=5 * v.turn_cap)
    for c in np.flatnonzero(cb):
        per_cat[RequestCategory.from_code(int(c), v.turn_cap).label] = (int(ch[c]), int(cb[c]))
    return HitAccounting(int(blocks.sum()), int(hits.sum()), hits, blocks, per_user, per_cat)


def reuse_skew(trace, **kw) -> Curve:
    """Share of blocks (by descending reuse count) vs cumulative share of reuses."""
    v = _view(trace, **kw)
    log = v.log
    if len(log) == 0:
        return Curve(np.empty(0), np.empty(0), "block_share", "reuse_share")
    uniq, inv = np.unique(log.key, return_inverse=True)
    counts = np.bincount(inv[v.hit_mask], minlength=uniq.size)
    return lorenz(counts, "block_share", "reuse_share")


def per_type_contribution(trace, **kw) -> dict:
    """Shares of all hits by request type and by single- vs multi-turn."""
    v = _view(trace, **kw)
    acc = ideal_hit_ratio(v)
    total = acc.hit_blocks
    by_type = {}
    for t in RequestType:
        h = int(acc.per_request_hits[v.req_type == t.index].sum())
        if h or np.any(v.req_type == t.index):
            by_type[t.value] = h / total if total else 0.0
    multi = int(acc.per_request_hits[v.req_turn > 1].sum())
    return {
        "total_hits": total,
        "by_type": by_type,
        "single_turn": (total - multi) / total if total else 0.0,
        "multi_turn": multi / total if total else 0.0,
    }


def cross_user_matrix(trace, top_k: int = 20, **kw) -> HeatmapTable:
    """Cell (i, j): hits by user i on blocks first produced by user j,
    normalized by all hits among the top-k users (by request count)."""
    v = _view(trace, **kw)
    log = v.log
    users, req_counts = np.unique(v.req_user.astype(str), return_counts=True)
    order = sorted(range(users.size), key=lambda i: (-req_counts[i], users[i]))
    top = [str(users[i]) for i in order[:top_k]]
    index = {u: i for i, u in enumerate(top)}
    mat = np.zeros((len(top), len(top)))
    hit = v.hit_mask
    same_user = 0
    total = int(hit.sum())
    if total:
        _, first = np.unique(log.key, return_index=True)
        _, inv = np.unique(log.key, return_inverse=True)
        producer_req = log.request[first][inv[hit]]
        hitter_req = log.request[hit]
        prod_u = v.req_user[producer_req]
        hit_u = v.req_user[hitter_req]
        same_user = int(np.sum(prod_u == hit_u))
        for a, b in zip(hit_u, prod_u):
            i, j = index.get(a), index.get(b)
            if i is not None and j is not None:
                mat[i, j] += 1
    s = mat.sum()
    if s:
        mat /= s
    meta = {
        "diagonal_mass": float(np.trace(mat)) if s else None,
        "same_user_share_all": same_user / total if total else None,
        "total_hits": total,
    }
    return HeatmapTable(top, top, mat, "hitter\\producer", meta)


def user_skew(trace, **kw) -> dict:
    """Lorenz curves of requests and of hits over users."""
    v = _view(trace, **kw)
    acc = ideal_hit_ratio(v)
    users = sorted(acc.per_user)
    req = {}
    for u in v.req_user:
        req[u] = req.get(u, 0) + 1
    return {
        "requests": lorenz([req[u] for u in users], "user_share", "request_share"),
        "hits": lorenz([acc.per_user[u][0] for u in users], "user_share", "hit_share"),
    }


# ------------------------------------------------------------------- turns


@dataclass
class UserTurnStats:
    users: list
    sessions: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def sorted_by(self, column: str = "mean") -> "UserTurnStats":
        key = getattr(self, column)
        order = sorted(range(len(self.users)), key=lambda i: (-key[i], self.users[i]))
        return UserTurnStats([self.users[i] for i in order], self.sessions[order], self.mean[order], self.std[order])

    def to_csv(self) -> str:
        lines = ["user,sessions,mean_turns,std_turns"]
        for u, n, m, s in zip(self.users, self.sessions, self.mean, self.std):
            lines.append(f"{u},{int(n)},{float(m)!r},{float(s)!r}")
        return "\n".join(lines) + "\n"


def turn_distribution(trace) -> tuple[DistributionTable, UserTurnStats]:
    """Session lengths (final turn numbers) and per-user mean/std, by mean."""
    recs = trace.records if isinstance(trace, TraceView) else trace
    sessions, _ = trace_sessions(trace)
    by_id = {r.chat_id: r for r in recs}
    lengths = [s.max_turn for s in sessions]
    dist = DistributionTable.from_values(lengths, "session_turns")
    per_user: dict = {}
    for s, n in zip(sessions, lengths):
        per_user.setdefault(by_id[s.session_id].user_id, []).append(n)
    users = sorted(per_user)
    stats = UserTurnStats(
        users,
        np.array([len(per_user[u]) for u in users]),
        np.array([float(np.mean(per_user[u])) for u in users]),
        np.array([float(np.std(per_user[u])) for u in users]),
    )
    return dist, stats.sorted_by("mean")


def trace_sessions(trace):
    if isinstance(trace, TraceView):
        return trace.sessions, trace.turns
    return link_sessions(trace)


def next_turn_frequency(
    trace, window: float = 600.0, categories: Sequence[str] | None = None, turn_cap: int = TURN_CAP
) -> HeatmapTable:
    """Per category and time window: share of requests that get a next turn.

    Rows are categories ordered by popularity (or as given); empty cells are NaN.
    """
    recs = trace.records if isinstance(trace, TraceView) else list(trace)
    _, turns = trace_sessions(trace)
    if not recs:
        return HeatmapTable([], [], np.zeros((0, 0)), "category\\window_start")
    has_child = {r.parent_chat_id for r in recs if r.parent_chat_id}
    t0 = min(r.timestamp for r in recs)
    n_win = int(math.floor((max(r.timestamp for r in recs) - t0) / window)) + 1
    labels = [RequestCategory.of(r.request_type, turns[r.chat_id], turn_cap).label for r in recs]
    if categories is None:
        pop: dict = {}
        for lab in labels:
            pop[lab] = pop.get(lab, 0) + 1
        categories = sorted(pop, key=lambda k: (-pop[k], k))
    row = {c: i for i, c in enumerate(categories)}
    num = np.zeros((len(categories), n_win))
    den = np.zeros((len(categories), n_win))
    for r, lab in zip(recs, labels):
        i = row.get(lab)
        if i is None:
            continue
        w = int((r.timestamp - t0) // window)
        den[i, w] += 1
        num[i, w] += r.chat_id in has_child
    with np.errstate(invalid="ignore", divide="ignore"):
        val = np.where(den > 0, num / np.where(den > 0, den, 1), np.nan)
    cols = [t0 + k * window for k in range(n_win)]
    return HeatmapTable(list(categories), cols, val, "category\\window_start", {"window": window})


# -------------------------------------------------------------- reuse time


def reuse_time_distribution(trace, group_by: str = "overall", **kw) -> dict:
    """Block reuse intervals over the whole trace, grouped by ``overall``,
    ``category`` (of the earlier access) or ``turn`` (single vs multi)."""
    v = _view(trace, **kw)
    log = v.log
    if len(log) == 0:
        return {"overall": DistributionTable.from_values([], "overall")}
    ss = distfit.collect_samples(log, float(log.time[0]), math.nextafter(float(log.time[-1]), math.inf))
    if group_by == "overall":
        return {"overall": DistributionTable.from_values(ss.interval, "overall")}
    if group_by == "category":
        out = {}
        for c in sorted(np.unique(ss.category).tolist()):
            lab = RequestCategory.from_code(c, v.turn_cap).label
            out[lab] = DistributionTable.from_values(ss.for_category(c), lab)
        return out
    if group_by == "turn":
        multi = (ss.category % v.turn_cap) > 0
        return {
            "single_turn": DistributionTable.from_values(ss.interval[~multi], "single_turn"),
            "multi_turn": DistributionTable.from_values(ss.interval[multi], "multi_turn"),
        }
    raise ValueError(f"unknown grouping {group_by!r}")


# ---------------------------------------------------------------- spatial

SPATIAL_NOTE = (
    "cells count key-presence matches: a block hits if its prefix key was "
    "cached by an earlier request's window, whether or not that request "
    "also cached the preceding blocks"
)


def spatial_heatmap(
    trace,
    offsets: Sequence[float] = tuple(range(0, 100, 10)),
    strides: Sequence[float] = tuple(range(10, 101, 10)),
    **kw,
) -> HeatmapTable:
    """Ideal hit ratio when each request caches only the blocks that lie
    entirely within ``[o%, o% + s%)`` of its block sequence."""
    for x in list(offsets) + list(strides):
        if not 0 <= x <= 100:
            raise ValueError("offsets and strides are percentages in [0, 100]")
    v = _view(trace, **kw)
    log = v.log
    n = len(log)
    total = int(v.input_mask.sum())
    vals = np.zeros((len(offsets), len(strides)))
    if n == 0 or total == 0:
        return HeatmapTable(list(offsets), list(strides), vals, "offset%\\stride%", {"note": SPATIAL_NOTE})
    nb = np.array([len(b.input_keys) + (len(b.output_keys) if v.include_outputs else 0) for b in v.blocked])
    length = nb[log.request].astype(np.float64)
    j = log.offset.astype(np.float64)
    _, inv = np.unique(log.key, return_inverse=True)
    idx = np.arange(n)
    inp = v.input_mask
    for a, o in enumerate(offsets):
        for b, s in enumerate(strides):
            hi = min(o + s, 100)
            cached = (100.0 * j >= o * length) & (100.0 * (j + 1) <= hi * length)
            first = np.full(inv.max() + 1, n)
            ck = inv[cached]
            u, pos = np.unique(ck, return_index=True)
            first[u] = idx[cached][pos]
            hits = int(np.sum(first[inv[inp]] < idx[inp]))
            vals[a, b] = hits / total
    return HeatmapTable(list(offsets), list(strides), vals, "offset%\\stride%", {"note": SPATIAL_NOTE})


# --------------------------------------------------------------- lifespans


def _block_spans(v: TraceView):
    log = v.log
    uniq, first = np.unique(log.key, return_index=True)
    _, inv = np.unique(log.key, return_inverse=True)
    last_t = np.full(uniq.size, -np.inf)
    np.maximum.at(last_t, inv, log.time)
    return log.time[first], last_t, log.category[first]


def lifespan_distribution(trace, **kw) -> DistributionTable:
    """Per block: last access minus first access (0 when never reused)."""
    v = _view(trace, **kw)
    if len(v.log) == 0:
        return DistributionTable.from_values([], "lifespan")
    first, last, _ = _block_spans(v)
    return DistributionTable.from_values(last - first, "lifespan")


def lifespan_timeline(trace, window: float = 600.0, **kw) -> HeatmapTable:
    """Mean lifespan of blocks born in each window, per category of birth."""
    v = _view(trace, **kw)
    if len(v.log) == 0:
        return HeatmapTable([], [], np.zeros((0, 0)), "category\\window_start")
    first, last, cat = _block_spans(v)
    t0 = float(first.min())
    w = ((first - t0) // window).astype(np.int64)
    n_win = int(w.max()) + 1
    cats = sorted(np.unique(cat).tolist())
    vals = np.full((len(cats), n_win), np.nan)
    for i, c in enumerate(cats):
        m = cat == c
        s = np.bincount(w[m], weights=(last - first)[m], minlength=n_win)
        k = np.bincount(w[m], minlength=n_win)
        vals[i, k > 0] = s[k > 0] / k[k > 0]
    labels = [RequestCategory.from_code(c, v.turn_cap).label for c in cats]
    return HeatmapTable(labels, [t0 + k * window for k in range(n_win)], vals, "category\\window_start", {"window": window})


# -------------------------------------------------------------- KV sizing


def kv_size_distribution(trace, profiles: Sequence[ModelProfile]) -> dict:
    """Per (profile, single|multi): per-request KV size as a share of the
    HBM available for KV on one instance."""
    recs = trace.records if isinstance(trace, TraceView) else list(trace)
    _, turns = trace_sessions(trace)
    out = {}
    for prof in profiles:
        single, multi = [], []
        for r in recs:
            f = normalized_hbm_fraction(prof, r.input_token_count + r.output_token_count)
            (multi if turns[r.chat_id] > 1 else single).append(f)
        out[(prof.name, "single")] = DistributionTable.from_values(single, f"{prof.name}-single")
        out[(prof.name, "multi")] = DistributionTable.from_values(multi, f"{prof.name}-multi")
    return out


# ------------------------------------------------------ clairvoyant capacity


@dataclass
class CapacityCurve:
    """Live blocks over time under a cache that keeps exactly the blocks that
    will be accessed again: a block is live on ``[first access, last access)``.

    ``breakpoints``/``levels`` describe the full step function; ``times`` and
    ``blocks`` sample it on the requested grid.
    """

    times: np.ndarray
    blocks: np.ndarray
    breakpoints: np.ndarray
    levels: np.ndarray  # live count on [breakpoints[i], breakpoints[i+1])
    block_tokens: int

    def integral(self) -> float:
        """Block-seconds under the step function."""
        if self.breakpoints.size < 2:
            return 0.0
        return float(np.sum(self.levels[:-1] * np.diff(self.breakpoints)))

    def bytes(self, profile: ModelProfile) -> np.ndarray:
        return self.blocks * self.block_tokens * profile.bytes_per_token

    def hbm_multiple(self, profile: ModelProfile) -> np.ndarray:
        return self.bytes(profile) / profile.hbm_for_kv_bytes

    def to_csv(self, profile: ModelProfile | None = None) -> str:
        head = "time,blocks" + (",bytes,hbm_multiple" if profile else "")
        lines = [head]
        for i, (t, b) in enumerate(zip(self.times, self.blocks)):
            row = f"{float(t)!r},{int(b)}"
            if profile:
                by = float(b) * self.block_tokens * profile.bytes_per_token
                row += f",{by!r},{by / profile.hbm_for_kv_bytes!r}"
            lines.append(row)
        return "\n".join(lines) + "\n"


def clairvoyant_capacity_curve(trace, times: Sequence[float] | None = None, step: float = 60.0, **kw) -> CapacityCurve:
    v = _view(trace, **kw)
    if len(v.log) == 0:
        z = np.empty(0)
        return CapacityCurve(np.asarray(times if times is not None else [], float), np.zeros(0 if times is None else len(times), np.int64), z, z.astype(np.int64), v.block_tokens)
    first, last, _ = _block_spans(v)
    live = last > first
    f, l = first[live], last[live]
    pts = np.unique(np.concatenate([f, l]))
    levels = np.searchsorted(np.sort(f), pts, side="right") - np.searchsorted(np.sort(l), pts, side="right")
    if times is None:
        t0, t1 = float(v.log.time[0]), float(v.log.time[-1])
        times = np.arange(t0, t1 + step, step)
    times = np.asarray(times, dtype=np.float64)
    blocks = np.searchsorted(np.sort(f), times, side="right") - np.searchsorted(np.sort(l), times, side="right")
    return CapacityCurve(times, blocks.astype(np.int64), pts, levels.astype(np.int64), v.block_tokens)


def block_lifespans(trace, **kw) -> np.ndarray:
    v = _view(trace, **kw)
    if len(v.log) == 0:
        return np.empty(0)
    first, last, _ = _block_spans(v)
    return last - first
