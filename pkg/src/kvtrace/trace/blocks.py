"""Expand records into simulator blocks keyed by chained prefix keys.

A sim-block spans ``sim_block_tokens / 4`` groups of the request's full
sequence (expanded input followed by output). Its key is the chained prefix
key of its last group. Only complete blocks exist; a trailing partial block
can never match and is ignored. Input blocks are the complete blocks lying
entirely inside the input; every later complete block (including one that
straddles the input/output boundary) is an output block.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from kvtrace.trace.hashing import DEFAULT_SEED, chain_keys_flat
from kvtrace.trace.sessions import AS_RECORDED, expand_input, link_sessions
from kvtrace.trace.types import GROUP_TOKENS, TURN_CAP, RequestCategory, TraceRecord


@dataclass(slots=True)
class BlockedRequest:
    index: int  # position in the original record list
    time: float
    user: str
    category: int  # RequestCategory code
    turn: int
    input_keys: list
    output_keys: list
    input_tokens: int = 0
    output_tokens: int = 0

    @property
    def n_input(self) -> int:
        return len(self.input_keys)

    @property
    def is_multi_turn(self) -> bool:
        return self.turn > 1


def group_span(sim_block_tokens: int) -> int:
    if sim_block_tokens <= 0 or sim_block_tokens % GROUP_TOKENS:
        raise ValueError(f"sim_block_tokens must be a positive multiple of {GROUP_TOKENS}")
    return sim_block_tokens // GROUP_TOKENS


def block_requests(
    records: Sequence[TraceRecord],
    sim_block_tokens: int = 16,
    mode: str = AS_RECORDED,
    seed: int = DEFAULT_SEED,
    turn_cap: int = TURN_CAP,
    include_outputs: bool = True,
) -> list[BlockedRequest]:
    """Blocked view of ``records`` in processing order (timestamp, then file order)."""
    span = group_span(sim_block_tokens)
    _, turns = link_sessions(records)
    by_id = {r.chat_id: r for r in records} if mode != AS_RECORDED else None

    seqs_in = [expand_input(r, mode, by_id) for r in records]
    seqs_out = [r.output_group_hashes if include_outputs else () for r in records]
    len_in = np.fromiter((len(s) for s in seqs_in), dtype=np.int64, count=len(records))
    len_out = np.fromiter((len(s) for s in seqs_out), dtype=np.int64, count=len(records))
    lengths = len_in + len_out
    total = int(lengths.sum())
    flat = np.fromiter(
        itertools.chain.from_iterable(itertools.chain(a, b) for a, b in zip(seqs_in, seqs_out)),
        dtype=np.uint64,
        count=total,
    )
    keys = chain_keys_flat(flat, lengths, seed)

    n_blocks = lengths // span
    n_in_blocks = len_in // span
    starts = np.zeros(len(records), dtype=np.int64)
    if len(records):
        np.cumsum(lengths[:-1], out=starts[1:])
    # flat position of each block's last group
    owner = np.repeat(np.arange(len(records)), n_blocks)
    first_block = np.zeros(len(records), dtype=np.int64)
    if len(records):
        np.cumsum(n_blocks[:-1], out=first_block[1:])
    local = np.arange(int(n_blocks.sum())) - first_block[owner]
    block_keys = keys[starts[owner] + (local + 1) * span - 1].tolist()

    out = []
    for i, rec in enumerate(records):
        b0 = int(first_block[i])
        nin = int(n_in_blocks[i])
        nb = int(n_blocks[i])
        turn = turns[rec.chat_id]
        out.append(
            BlockedRequest(
                index=i,
                time=rec.timestamp,
                user=rec.user_id,
                category=RequestCategory.of(rec.request_type, turn, turn_cap).code(turn_cap),
                turn=turn,
                input_keys=block_keys[b0 : b0 + nin],
                output_keys=block_keys[b0 + nin : b0 + nb],
                input_tokens=rec.input_token_count,
                output_tokens=rec.output_token_count,
            )
        )
    out.sort(key=lambda b: (b.time, b.index))
    return out


@dataclass
class AccessLog:
    """Time-ordered block accesses (input references and output insertions).

    ``prev`` holds, for each access, the index of the previous access to the
    same key (-1 if none); ``gap`` the elapsed time since it (NaN if none).
    """

    time: np.ndarray
    key: np.ndarray
    category: np.ndarray
    offset: np.ndarray
    request: np.ndarray
    is_output: np.ndarray
    prev: np.ndarray
    gap: np.ndarray

    def __len__(self) -> int:
        return len(self.time)

    def window(self, start: float, end: float) -> slice:
        lo = int(np.searchsorted(self.time, start, side="left"))
        hi = int(np.searchsorted(self.time, end, side="left"))
        return slice(lo, hi)


def access_log(
    blocked: Sequence[BlockedRequest],
    include_outputs: bool = True,
    decode_delay: float = 0.0,
) -> AccessLog:
    """Flatten blocked requests into an :class:`AccessLog`.

    Output blocks are stamped at ``time + decode_delay * output_tokens``.
    """
    n_in = np.fromiter((len(b.input_keys) for b in blocked), dtype=np.int64, count=len(blocked))
    if include_outputs:
        n_out = np.fromiter((len(b.output_keys) for b in blocked), dtype=np.int64, count=len(blocked))
    else:
        n_out = np.zeros(len(blocked), dtype=np.int64)
    per = n_in + n_out
    total = int(per.sum())
    req = np.repeat(np.arange(len(blocked)), per)
    first = np.zeros(len(blocked), dtype=np.int64)
    if len(blocked):
        np.cumsum(per[:-1], out=first[1:])
    offset = np.arange(total) - first[req]
    is_output = offset >= n_in[req]
    times = np.fromiter((b.time for b in blocked), dtype=np.float64, count=len(blocked))
    out_tok = np.fromiter((b.output_tokens for b in blocked), dtype=np.float64, count=len(blocked))
    time = times[req] + np.where(is_output, decode_delay * out_tok[req], 0.0)
    cats = np.fromiter((b.category for b in blocked), dtype=np.int64, count=len(blocked))[req]
    if include_outputs:
        it = itertools.chain.from_iterable(itertools.chain(b.input_keys, b.output_keys) for b in blocked)
    else:
        it = itertools.chain.from_iterable(b.input_keys for b in blocked)
    key = np.fromiter(it, dtype=np.uint64, count=total)

    order = np.argsort(time, kind="stable")
    time, key, cats, offset, req, is_output = (a[order] for a in (time, key, cats, offset, req, is_output))

    prev = np.full(total, -1, dtype=np.int64)
    if total:
        by_key = np.lexsort((np.arange(total), key))
        same = key[by_key[1:]] == key[by_key[:-1]]
        prev[by_key[1:][same]] = by_key[:-1][same]
    gap = np.full(total, np.nan)
    has = prev >= 0
    gap[has] = time[has] - time[prev[has]]
    return AccessLog(time, key, cats, offset, req, is_output, prev, gap)
