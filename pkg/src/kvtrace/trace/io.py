"""CSV / JSONL readers and writers for the anonymized trace format.

CSV header (required)::

    timestamp,chat_id,parent_chat_id,user_id,type,input_tokens,output_tokens,input_hashes,output_hashes

Hash lists are ``|``-separated unsigned decimals. JSONL uses the same field
names, one object per line, with hash lists as JSON arrays of integers.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass
from typing import IO, Iterable, Iterator, Union

from kvtrace.trace.types import RequestType, TraceRecord

FIELDS = (
    "timestamp",
    "chat_id",
    "parent_chat_id",
    "user_id",
    "type",
    "input_tokens",
    "output_tokens",
    "input_hashes",
    "output_hashes",
)

Source = Union[str, os.PathLike, bytes, IO[bytes], IO[str]]


@dataclass(frozen=True)
class Diagnostic:
    row: int  # 1-based data row (header excluded)
    field: str
    message: str

    def __str__(self) -> str:
        return f"row {self.row}: {self.field}: {self.message}"


class TraceFormatError(ValueError):
    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = diagnostics
        shown = "; ".join(str(d) for d in diagnostics[:5])
        more = f" (+{len(diagnostics) - 5} more)" if len(diagnostics) > 5 else ""
        super().__init__(f"{len(diagnostics)} invalid row(s): {shown}{more}")


def _open_text(source: Source) -> IO[str]:
    if isinstance(source, (str, os.PathLike)):
        return open(source, "r", encoding="utf-8", newline="")
    if isinstance(source, bytes):
        return io.StringIO(source.decode("utf-8"), newline="")
    if isinstance(source, io.TextIOBase):
        return source
    return io.TextIOWrapper(source, encoding="utf-8", newline="")


def _parse_hashes(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(part) for part in text.split("|"))


def _as_int(value, name: str) -> int:
    if isinstance(value, bool):
        raise ValueError(f"{name} must be an integer")
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        if not value.is_integer():
            raise ValueError(f"{name} must be an integer")
        return int(value)
    return int(str(value).strip())


def _build(row: dict, rowno: int, diags: list[Diagnostic]) -> TraceRecord | None:
    field = "timestamp"
    try:
        ts = float(row["timestamp"])
        if ts != ts or ts in (float("inf"), float("-inf")):
            raise ValueError("timestamp must be finite")
        field = "chat_id"
        chat_id = str(row["chat_id"]).strip()
        if not chat_id:
            raise ValueError("empty chat_id")
        field = "parent_chat_id"
        parent = row.get("parent_chat_id")
        parent = str(parent).strip() if parent not in (None, "") else None
        field = "user_id"
        user = str(row["user_id"]).strip()
        field = "type"
        rtype = RequestType.parse(str(row["type"]))
        field = "input_tokens"
        n_in = _as_int(row["input_tokens"], field)
        field = "output_tokens"
        n_out = _as_int(row["output_tokens"], field)
        field = "input_hashes"
        h_in = row["input_hashes"]
        h_in = _parse_hashes(h_in) if isinstance(h_in, str) else tuple(_as_int(h, field) for h in h_in)
        field = "output_hashes"
        h_out = row["output_hashes"]
        h_out = _parse_hashes(h_out) if isinstance(h_out, str) else tuple(_as_int(h, field) for h in h_out)
    except KeyError as exc:
        diags.append(Diagnostic(rowno, str(exc.args[0]), "missing field"))
        return None
    except (ValueError, TypeError) as exc:
        diags.append(Diagnostic(rowno, field, str(exc)))
        return None
    rec = TraceRecord(ts, chat_id, parent, user, rtype, n_in, n_out, h_in, h_out)
    problems = rec.validate()
    if problems:
        for p in problems:
            fld = "input_hashes" if "input_tokens" in p else "output_hashes" if "output_tokens" in p else "record"
            diags.append(Diagnostic(rowno, fld, p))
        return None
    return rec


def _iter_rows(fh: IO[str], fmt: str, diags: list[Diagnostic]) -> Iterator[tuple[int, dict]]:
    if fmt == "csv":
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return
        header = [h.strip() for h in header]
        if tuple(header) != FIELDS:
            diags.append(Diagnostic(0, "header", f"expected {','.join(FIELDS)}"))
            return
        for rowno, values in enumerate(reader, start=1):
            if not values:
                continue
            if len(values) != len(FIELDS):
                diags.append(Diagnostic(rowno, "row", f"expected {len(FIELDS)} columns, got {len(values)}"))
                continue
            yield rowno, dict(zip(FIELDS, values))
    elif fmt == "jsonl":
        for rowno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                diags.append(Diagnostic(rowno, "json", exc.msg))
                continue
            if not isinstance(obj, dict):
                diags.append(Diagnostic(rowno, "json", "expected an object"))
                continue
            yield rowno, obj
    else:
        raise ValueError(f"unknown trace format {fmt!r}")


def read_trace(source: Source, fmt: str = "csv") -> tuple[list[TraceRecord], list[Diagnostic]]:
    """Parse a trace, returning valid records in file order and row diagnostics.

    Invalid rows are dropped. Duplicate chat_ids keep the first occurrence.
    A parent that exists in the trace but is not strictly earlier is reported
    on the child row.
    """
    diags: list[Diagnostic] = []
    records: list[TraceRecord] = []
    rows: list[int] = []
    fh = _open_text(source)
    wrapped = fh is not source and not isinstance(source, (str, os.PathLike))
    try:
        seen: set[str] = set()
        for rowno, row in _iter_rows(fh, fmt, diags):
            rec = _build(row, rowno, diags)
            if rec is None:
                continue
            if rec.chat_id in seen:
                diags.append(Diagnostic(rowno, "chat_id", f"duplicate chat_id {rec.chat_id!r}"))
                continue
            seen.add(rec.chat_id)
            records.append(rec)
            rows.append(rowno)
    finally:
        if isinstance(source, (str, os.PathLike)):
            fh.close()
        elif wrapped and isinstance(fh, io.TextIOWrapper):
            fh.detach()

    when = {r.chat_id: r.timestamp for r in records}
    keep = []
    for rec, rowno in zip(records, rows):
        if rec.parent_chat_id in when and not when[rec.parent_chat_id] < rec.timestamp:
            diags.append(Diagnostic(rowno, "parent_chat_id", "parent is not strictly earlier than child"))
            continue
        keep.append(rec)
    diags.sort(key=lambda d: d.row)
    return keep, diags


def parse_trace(source: Source, fmt: str = "csv") -> list[TraceRecord]:
    """Strict parse: raise :class:`TraceFormatError` if any row is invalid."""
    records, diags = read_trace(source, fmt)
    if diags:
        raise TraceFormatError(diags)
    return records


def _format_ts(ts: float) -> str:
    # repr is the shortest string that round-trips exactly
    return repr(float(ts))


def _row(rec: TraceRecord) -> list[str]:
    return [
        _format_ts(rec.timestamp),
        rec.chat_id,
        rec.parent_chat_id or "",
        rec.user_id,
        rec.request_type.value,
        str(rec.input_token_count),
        str(rec.output_token_count),
        "|".join(map(str, rec.input_group_hashes)),
        "|".join(map(str, rec.output_group_hashes)),
    ]


def write_trace(records: Iterable[TraceRecord], dest: Union[str, os.PathLike, IO[str]], fmt: str = "csv") -> None:
    own = isinstance(dest, (str, os.PathLike))
    fh = open(dest, "w", encoding="utf-8", newline="") if own else dest
    try:
        if fmt == "csv":
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(FIELDS)
            for rec in records:
                writer.writerow(_row(rec))
        elif fmt == "jsonl":
            for rec in records:
                obj = {
                    "timestamp": rec.timestamp,
                    "chat_id": rec.chat_id,
                    "parent_chat_id": rec.parent_chat_id or "",
                    "user_id": rec.user_id,
                    "type": rec.request_type.value,
                    "input_tokens": rec.input_token_count,
                    "output_tokens": rec.output_token_count,
                    "input_hashes": list(rec.input_group_hashes),
                    "output_hashes": list(rec.output_group_hashes),
                }
                fh.write(json.dumps(obj, separators=(",", ":")) + "\n")
        else:
            raise ValueError(f"unknown trace format {fmt!r}")
    finally:
        if own:
            fh.close()


def serialize_trace(records: Iterable[TraceRecord], fmt: str = "csv") -> bytes:
    buf = io.StringIO(newline="")
    write_trace(records, buf, fmt)
    return buf.getvalue().encode("utf-8")


def sniff_format(path: Union[str, os.PathLike]) -> str:
    name = os.fspath(path).lower()
    return "jsonl" if name.endswith((".jsonl", ".ndjson", ".json")) else "csv"
