"""Session linking, multi-turn input expansion and time scaling."""

from __future__ import annotations

import logging
from dataclasses import replace
from typing import Mapping, Sequence

from kvtrace.trace.types import Session, TraceRecord

log = logging.getLogger(__name__)

AS_RECORDED = "as_recorded"
RECONSTRUCT = "reconstruct"


class SessionCycleError(ValueError):
    pass


class MissingAncestorError(LookupError):
    pass


def link_sessions(records: Sequence[TraceRecord]) -> tuple[list[Session], dict[str, int]]:
    """Group records into sessions by following parent links.

    Returns the sessions (ordered by root appearance in ``records``) and a
    ``chat_id -> turn_number`` map. A record whose parent is missing from the
    trace becomes the root of its own session with ``dangling_parent`` set.
    A parent cycle raises :class:`SessionCycleError`.
    """
    by_id = {r.chat_id: r for r in records}
    turns: dict[str, int] = {}
    root_of: dict[str, str] = {}
    dangling: dict[str, str] = {}

    for rec in records:
        if rec.chat_id in turns:
            continue
        # walk up until a resolved ancestor, a root, or a dangling link
        path = []
        on_path = set()
        cur = rec
        while True:
            if cur.chat_id in on_path:
                raise SessionCycleError(f"parent cycle through chat_id {cur.chat_id!r}")
            parent = cur.parent_chat_id
            if parent and parent in turns:
                path.append(cur)
                base_turn, root = turns[parent], root_of[parent]
                break
            if not parent or parent not in by_id:
                # cur starts a session
                if parent:
                    dangling[cur.chat_id] = parent
                turns[cur.chat_id] = 1
                root_of[cur.chat_id] = cur.chat_id
                base_turn, root = 1, cur.chat_id
                break
            path.append(cur)
            on_path.add(cur.chat_id)
            cur = by_id[parent]
        for depth, node in enumerate(reversed(path), start=1):
            turns[node.chat_id] = base_turn + depth
            root_of[node.chat_id] = root

    if dangling:
        log.warning("%d record(s) reference a parent missing from the trace", len(dangling))

    sessions: dict[str, Session] = {}
    order = sorted(range(len(records)), key=lambda i: (records[i].timestamp, i))
    for i in order:
        rec = records[i]
        root = root_of[rec.chat_id]
        sess = sessions.get(root)
        if sess is None:
            sess = sessions[root] = Session(root, dangling_parent=dangling.get(root))
        sess.turns.append(rec.chat_id)
        sess.turn_numbers.append(turns[rec.chat_id])
    first_seen = {}
    for i, rec in enumerate(records):
        first_seen.setdefault(root_of[rec.chat_id], i)
    ordered = sorted(sessions.values(), key=lambda s: first_seen[s.session_id])
    return ordered, turns


def expand_input(
    record: TraceRecord,
    mode: str = AS_RECORDED,
    by_id: Mapping[str, TraceRecord] | None = None,
) -> list[int]:
    """Group hashes making up the full model input of ``record``.

    ``as_recorded`` trusts the trace: multi-turn inputs already contain the
    history. ``reconstruct`` is for delta traces and prepends every
    ancestor's input and output groups, oldest first.
    """
    if mode == AS_RECORDED or not record.parent_chat_id:
        return list(record.input_group_hashes)
    if mode != RECONSTRUCT:
        raise ValueError(f"unknown expansion mode {mode!r}")
    if by_id is None:
        raise MissingAncestorError("reconstruct mode needs the session context")
    chain = []
    seen = {record.chat_id}
    parent = record.parent_chat_id
    while parent:
        anc = by_id.get(parent)
        if anc is None:
            raise MissingAncestorError(f"ancestor {parent!r} of {record.chat_id!r} not in trace")
        if anc.chat_id in seen:
            raise SessionCycleError(f"parent cycle through chat_id {anc.chat_id!r}")
        seen.add(anc.chat_id)
        chain.append(anc)
        parent = anc.parent_chat_id
    groups: list[int] = []
    for anc in reversed(chain):
        groups.extend(anc.input_group_hashes)
        groups.extend(anc.output_group_hashes)
    groups.extend(record.input_group_hashes)
    return groups


def scale_trace(records: Sequence[TraceRecord], qps_factor: float) -> list[TraceRecord]:
    """Compress time by ``qps_factor`` (t -> t / factor), keeping order and IDs."""
    if not qps_factor > 0:
        raise ValueError(f"qps_factor must be positive, got {qps_factor}")
    if qps_factor == 1:
        return list(records)
    return [replace(r, timestamp=r.timestamp / qps_factor) for r in records]
