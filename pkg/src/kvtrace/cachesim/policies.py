"""Eviction policies for one cache tier.

Every policy exposes ``add(e, now)``, ``touch(e, now)``, ``remove(e)`` and
``pop_victim(now)``. The hierarchy owns the key map and updates entry fields
(last access, frequency, category) before calling ``touch``.

Ordered policies keep a lazy binary heap: each push carries the entry's
version, and any change that alters the entry's position (or removal from
the tier) bumps the version so older heap items are skipped on pop. Ties
are always broken by larger offset first, then earlier insertion, so deeper
prefix blocks go before the blocks they depend on.
"""

from __future__ import annotations

import heapq
import math
from collections import OrderedDict
from typing import Callable, Iterable, Mapping

from kvtrace.cachesim.entries import BlockEntry, EmptyTierError

heappush = heapq.heappush
heappop = heapq.heappop


def lru_key(e: BlockEntry) -> tuple:
    return (e.last_access, -e.offset, e.insert_seq)


def fifo_key(e: BlockEntry) -> tuple:
    return (e.insert_time, -e.offset, e.insert_seq)


def lfu_key(e: BlockEntry) -> tuple:
    return (e.frequency, -e.offset, e.insert_seq)


def gdfs_priority(clock: float, frequency: int, cost: float, size: float = 1.0) -> float:
    return clock + frequency * cost / size


def _min_entry(entries: Iterable[BlockEntry], key: Callable) -> BlockEntry:
    best = None
    best_k = None
    for e in entries:
        k = key(e)
        if best is None or k < best_k:
            best, best_k = e, k
    if best is None:
        raise EmptyTierError("no block to evict")
    return best


def choose_victim_lru(entries: Iterable[BlockEntry]) -> BlockEntry:
    return _min_entry(entries, lru_key)


def choose_victim_fifo(entries: Iterable[BlockEntry]) -> BlockEntry:
    return _min_entry(entries, fifo_key)


def choose_victim_lfu(entries: Iterable[BlockEntry]) -> BlockEntry:
    return _min_entry(entries, lfu_key)


def choose_victim_gdfs(entries: Iterable[BlockEntry]) -> BlockEntry:
    return _min_entry(entries, lambda e: (e.prio, -e.offset, e.insert_seq))


class HeapPolicy:
    name = "base"

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.heap: list = []
        self.live = 0

    def _push(self, e: BlockEntry) -> None:
        raise NotImplementedError

    def add(self, e: BlockEntry, now: float) -> None:
        e.version += 1
        self.live += 1
        self._push(e)
        if len(self.heap) > 4 * self.live + 64:
            self._compact()

    def touch(self, e: BlockEntry, now: float) -> None:
        e.version += 1
        self._push(e)
        if len(self.heap) > 4 * self.live + 64:
            self._compact()

    def remove(self, e: BlockEntry) -> None:
        e.version += 1
        self.live -= 1

    def pop_victim(self, now: float) -> BlockEntry:
        heap = self.heap
        while heap:
            item = heappop(heap)
            e = item[-1]
            if item[-2] == e.version:
                e.version += 1
                self.live -= 1
                self._popped(item)
                return e
        raise EmptyTierError(f"{self.name}: tier is empty")

    def _popped(self, item) -> None:
        pass

    def _compact(self) -> None:
        self.heap = [it for it in self.heap if it[-2] == it[-1].version]
        heapq.heapify(self.heap)


class LRUPolicy(HeapPolicy):
    name = "lru"

    def _push(self, e):
        heappush(self.heap, (e.last_access, -e.offset, e.insert_seq, e.version, e))


class FIFOPolicy(HeapPolicy):
    name = "fifo"

    def _push(self, e):
        heappush(self.heap, (e.insert_time, -e.offset, e.insert_seq, e.version, e))

    def touch(self, e, now):
        # position depends only on insertion
        pass


class LFUPolicy(HeapPolicy):
    name = "lfu"

    def _push(self, e):
        heappush(self.heap, (e.frequency, -e.offset, e.insert_seq, e.version, e))


class GDFSPolicy(HeapPolicy):
    """GreedyDual-Size-Frequency with uniform cost and unit size.

    Priority is ``clock + frequency * cost / size`` set on insert and on each
    access; evicting sets the clock to the victim's priority.
    """

    name = "gdfs"

    def __init__(self, capacity: int, cost: float = 1.0):
        super().__init__(capacity)
        self.cost = cost
        self.clock = 0.0

    def _push(self, e):
        e.prio = self.clock + e.frequency * self.cost
        heappush(self.heap, (e.prio, -e.offset, e.insert_seq, e.version, e))

    def _popped(self, item):
        self.clock = item[0]


class ClairvoyantPolicy(HeapPolicy):
    """Evict the block whose next input reference is farthest away.

    A block whose prefix parent is not resident cannot be hit until the
    parent returns, so such dangling blocks are evicted before any block
    with an intact prefix.
    """

    name = "clairvoyant"

    def __init__(self, capacity: int):
        super().__init__(capacity)
        self.held: dict = {}
        self.kids: dict = {}

    def _push(self, e):
        intact = e.parent is None or e.parent in self.held
        heappush(self.heap, (intact, -e.next_ref, -e.offset, e.insert_seq, e.version, e))

    def _repush_kids(self, key):
        for c in self.kids.get(key, {}).values():
            c.version += 1
            self._push(c)

    def add(self, e, now):
        self.held[e.key] = e
        if e.parent is not None:
            self.kids.setdefault(e.parent, {})[e.key] = e
        super().add(e, now)
        self._repush_kids(e.key)

    def _forget(self, e):
        del self.held[e.key]
        if e.parent is not None:
            sib = self.kids[e.parent]
            del sib[e.key]
            if not sib:
                del self.kids[e.parent]
        self._repush_kids(e.key)

    def remove(self, e):
        super().remove(e)
        self._forget(e)

    def pop_victim(self, now):
        e = super().pop_victim(now)
        self._forget(e)
        return e


class S3FIFOPolicy:
    """Small/main/ghost FIFO queues.

    New blocks enter the small queue (10% of capacity, at least one block)
    unless their key is in the ghost queue, in which case they enter main.
    Evicting from small moves a block to main if it was accessed at least
    twice, otherwise drops it and remembers its key in the ghost queue
    (sized like main). Main evicts FIFO with a one-bit second chance.
    """

    name = "s3fifo"

    def __init__(self, capacity: int, small_ratio: float = 0.1):
        self.capacity = capacity
        self.small_cap = max(1, int(capacity * small_ratio))
        self.main_cap = capacity - self.small_cap
        self.small: OrderedDict = OrderedDict()
        self.main: OrderedDict = OrderedDict()
        self.ghost: OrderedDict = OrderedDict()

    def add(self, e, now):
        k = e.key
        e.s3 = 0
        if k in self.ghost:
            del self.ghost[k]
            self.main[k] = e
        else:
            self.small[k] = e

    def touch(self, e, now):
        if e.key in self.small:
            if e.s3 < 3:
                e.s3 += 1
        else:
            e.s3 = 1

    def remove(self, e):
        if self.small.pop(e.key, None) is None:
            self.main.pop(e.key, None)

    def _to_ghost(self, k):
        if self.main_cap <= 0:
            return
        self.ghost[k] = None
        if len(self.ghost) > self.main_cap:
            self.ghost.popitem(last=False)

    def pop_victim(self, now):
        small, main = self.small, self.main
        while small or main:
            if small and (len(small) >= self.small_cap or not main):
                k, e = small.popitem(last=False)
                if e.s3 >= 1 and self.main_cap > 0:
                    e.s3 = 0
                    main[k] = e
                    continue
                self._to_ghost(k)
                return e
            k, e = main.popitem(last=False)
            if e.s3:
                e.s3 = 0
                main[k] = e
                continue
            return e
        raise EmptyTierError("s3fifo: tier is empty")

    def __len__(self):
        return len(self.small) + len(self.main)


# ---------------------------------------------------------------- workload-aware

_FALLBACK_LAMBDA = 1.0


class WACoefficients:
    """Per-category ``(a, lam)`` so that ``log ReuseProb = a - lam * age``.

    ``a = log p + log(1 - exp(-lam * life))``. A category without a fit uses
    the pooled fit; with no pooled fit either it uses ``p = 1`` and
    ``lam = 1 / life``, which orders blocks by recency alone.
    """

    def __init__(self, snapshot=None, life: float = math.inf):
        self.snapshot = snapshot
        self.life = life
        self._cache: dict = {}

    def fit_params(self, code: int) -> tuple:
        snap = self.snapshot
        fit = None
        if snap is not None:
            fit = snap.get(code)
            if fit is None and snap.pooled is not None and snap.pooled.fitted:
                fit = snap.pooled
        if fit is not None:
            return fit.p, fit.lam
        life = self.life
        lam = 1.0 / life if 0 < life < math.inf else _FALLBACK_LAMBDA
        return 1.0, lam

    def __call__(self, code: int) -> tuple:
        c = self._cache.get(code)
        if c is None:
            p, lam = self.fit_params(code)
            if p <= 0:
                a = -math.inf
            else:
                a = math.log(p) + math.log(-math.expm1(-lam * self.life))
            c = self._cache[code] = (a, lam)
        return c


def wa_priority(e: BlockEntry, now: float, coeffs: WACoefficients) -> tuple:
    """``(reuse probability, -offset)``; the lower tuple is evicted first."""
    p, lam = coeffs.fit_params(e.category)
    prob = p * math.exp(-lam * (now - e.last_access)) * -math.expm1(-lam * coeffs.life)
    return (prob, -e.offset)


def wa_sort_key(e: BlockEntry, now: float, coeffs: WACoefficients) -> tuple:
    """Total order used by both victim searches (log-space priority first)."""
    a, lam = coeffs(e.category)
    return (a - lam * (now - e.last_access), -e.offset, e.last_access, e.insert_seq)


def wa_choose_victim_scan(entries: Iterable[BlockEntry], now: float, coeffs: WACoefficients) -> BlockEntry:
    """Evaluate every block and return the minimum."""
    return _min_entry(entries, lambda e: wa_sort_key(e, now, coeffs))


def wa_choose_victim_fast(queues: Mapping, now: float, coeffs: WACoefficients):
    """Evaluate only the least recently used block of each category queue.

    ``queues`` maps category code to a lazy heap of
    ``(last_access, -offset, insert_seq, version, entry)``. Stale heads are
    discarded in place. Within a category the priority falls with age, so
    the head is that category's minimum. Returns ``(entry, code)``.
    """
    best = None
    best_k = None
    best_c = None
    for code, q in queues.items():
        while q and q[0][3] != q[0][4].version:
            heappop(q)
        if not q:
            continue
        last, noff, seq, _, e = q[0]
        a, lam = coeffs(code)
        k = (a - lam * (now - last), noff, last, seq)
        if best is None or k < best_k:
            best, best_k, best_c = e, k, code
    if best is None:
        raise EmptyTierError("wa: tier is empty")
    return best, best_c


class WAPolicy:
    """Workload-aware eviction over per-category recency heaps.

    Evictions at one timestamp usually come in bursts, so the heads'
    priorities are kept in a small heap that lives until time moves or the
    coefficients change. A heads-heap item is trusted only if its entry is
    still the valid head of its category queue; otherwise it is replaced by
    the current head. Because a queue's head can only move to a block with
    a priority at least as high, this selects the same victim as
    :func:`wa_choose_victim_fast`.
    """

    name = "wa"

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.queues: dict = {}
        self.coeffs = WACoefficients()
        self.items = 0
        self.live = 0
        self._heads: list | None = None
        self._heads_now = None

    def set_coefficients(self, coeffs: WACoefficients) -> None:
        self.coeffs = coeffs
        self._heads = None

    def _push(self, e):
        code = e.category
        q = self.queues.get(code)
        if q is None:
            q = self.queues[code] = []
        item = (e.last_access, -e.offset, e.insert_seq, e.version, e)
        heappush(q, item)
        if q[0] is item and self._heads is not None:
            heappush(self._heads, self._head_key(code, item))
        self.items += 1
        if self.items > 4 * self.live + 64:
            self._compact()

    def _head_key(self, code, item):
        c = self.coeffs._cache.get(code)
        a, lam = c if c is not None else self.coeffs(code)
        last = item[0]
        return (a - lam * (self._heads_now - last), item[1], last, item[2], code, item)

    def _build_heads(self, now):
        heads = []
        self._heads_now = now
        for code, q in self.queues.items():
            while q and q[0][3] != q[0][4].version:
                heappop(q)
            if q:
                heads.append(self._head_key(code, q[0]))
        heapq.heapify(heads)
        self._heads = heads

    def add(self, e, now):
        e.version += 1
        self.live += 1
        self._push(e)

    def touch(self, e, now):
        e.version += 1
        self._push(e)

    def remove(self, e):
        e.version += 1
        self.live -= 1

    def pop_victim(self, now):
        if self._heads is None or self._heads_now != now:
            self._build_heads(now)
        heads = self._heads
        queues = self.queues
        cache = self.coeffs._cache
        while heads:
            h = heads[0]
            code = h[4]
            item = h[5]
            q = queues[code]
            e = None
            if q and q[0] is item and item[3] == item[4].version:
                heappop(q)
                e = item[4]
                e.version += 1
                self.live -= 1
            while q and q[0][3] != q[0][4].version:
                heappop(q)
            if q and q[0] is not item:
                nxt = q[0]
                c = cache.get(code)
                a, lam = c if c is not None else self.coeffs(code)
                last = nxt[0]
                heapq.heapreplace(heads, (a - lam * (now - last), nxt[1], last, nxt[2], code, nxt))
            else:
                heappop(heads)
            if e is not None:
                return e
        raise EmptyTierError("wa: tier is empty")

    def _compact(self):
        total = 0
        for code in list(self.queues):
            q = [it for it in self.queues[code] if it[3] == it[4].version]
            if q:
                heapq.heapify(q)
                self.queues[code] = q
                total += len(q)
            else:
                del self.queues[code]
        self.items = total
        self._heads = None


POLICIES = ("lru", "fifo", "lfu", "s3fifo", "gdfs", "wa")
BASELINES = ("lru", "fifo", "lfu", "s3fifo", "gdfs")


def make_policy(kind: str, capacity: int, miss_cost: float = 1.0):
    kind = kind.lower().replace("-", "")
    if kind == "lru":
        return LRUPolicy(capacity)
    if kind == "fifo":
        return FIFOPolicy(capacity)
    if kind == "lfu":
        return LFUPolicy(capacity)
    if kind == "gdfs":
        return GDFSPolicy(capacity, miss_cost)
    if kind == "s3fifo":
        return S3FIFOPolicy(capacity)
    if kind == "wa":
        return WAPolicy(capacity)
    if kind == "clairvoyant":
        return ClairvoyantPolicy(capacity)
    raise ValueError(f"unknown policy {kind!r}")
