"""Core record types for anonymized serving traces."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

GROUP_TOKENS = 4
TURN_CAP = 8


class RequestType(enum.Enum):
    TEXT = "text"
    FILE = "file"
    MULTIMODAL = "multimodal"
    SEARCH = "search"
    API = "api"

    @classmethod
    def parse(cls, value: str) -> "RequestType":
        try:
            return cls(value.strip().lower())
        except ValueError:
            raise ValueError(f"unknown request type {value!r}") from None

    @property
    def index(self) -> int:
        return _TYPE_INDEX[self]


_TYPES = list(RequestType)
_TYPE_INDEX = {t: i for i, t in enumerate(_TYPES)}


@dataclass(frozen=True)
class TraceRecord:
    """One serving request.

    ``input_group_hashes`` holds one 64-bit hash per 4 consecutive input
    tokens; a trailing partial group carries no hash.
    """

    timestamp: float
    chat_id: str
    parent_chat_id: Optional[str]
    user_id: str
    request_type: RequestType
    input_token_count: int
    output_token_count: int
    input_group_hashes: tuple[int, ...] = ()
    output_group_hashes: tuple[int, ...] = ()

    @property
    def is_multi_turn(self) -> bool:
        return bool(self.parent_chat_id)

    def validate(self) -> list[str]:
        """Return a list of invariant violations (empty when valid)."""
        problems = []
        if self.input_token_count < 0 or self.output_token_count < 0:
            problems.append("token counts must be non-negative")
        if len(self.input_group_hashes) != self.input_token_count // GROUP_TOKENS:
            problems.append(
                f"hash-count mismatch: input_tokens={self.input_token_count} "
                f"expects {self.input_token_count // GROUP_TOKENS} hashes, "
                f"got {len(self.input_group_hashes)}"
            )
        if len(self.output_group_hashes) != self.output_token_count // GROUP_TOKENS:
            problems.append(
                f"hash-count mismatch: output_tokens={self.output_token_count} "
                f"expects {self.output_token_count // GROUP_TOKENS} hashes, "
                f"got {len(self.output_group_hashes)}"
            )
        for h in self.input_group_hashes + self.output_group_hashes:
            if not 0 <= h < 1 << 64:
                problems.append(f"hash {h} outside the unsigned 64-bit range")
                break
        if not self.chat_id:
            problems.append("empty chat_id")
        if self.parent_chat_id == self.chat_id:
            problems.append("record is its own parent")
        return problems


class RequestCategory(NamedTuple):
    """Workload unit for fitting and eviction: request type plus turn bucket."""

    request_type: RequestType
    turn_bucket: int

    @classmethod
    def of(cls, request_type: RequestType, turn_number: int, turn_cap: int = TURN_CAP):
        return cls(request_type, max(1, min(turn_number, turn_cap)))

    @property
    def label(self) -> str:
        return f"{self.request_type.value}-{self.turn_bucket}"

    def code(self, turn_cap: int = TURN_CAP) -> int:
        return self.request_type.index * turn_cap + self.turn_bucket - 1

    @classmethod
    def from_code(cls, code: int, turn_cap: int = TURN_CAP) -> "RequestCategory":
        return cls(_TYPES[code // turn_cap], code % turn_cap + 1)

    @classmethod
    def from_label(cls, label: str) -> "RequestCategory":
        kind, _, bucket = label.rpartition("-")
        return cls(RequestType.parse(kind), int(bucket))

    def __str__(self) -> str:
        return self.label


@dataclass
class Session:
    session_id: str
    turns: list[str] = field(default_factory=list)
    turn_numbers: list[int] = field(default_factory=list)
    # set when the root named a parent that is missing from the trace
    dangling_parent: Optional[str] = None

    def __len__(self) -> int:
        return len(self.turns)

    @property
    def max_turn(self) -> int:
        return max(self.turn_numbers) if self.turn_numbers else 0


class PrefixKey(NamedTuple):
    value: int
    group_index: int


@dataclass(frozen=True)
class ModelProfile:
    name: str
    attention: str  # "GQA" or "MHA"
    bytes_per_token: float
    hbm_for_kv_bytes: float
    gpus_per_instance: int = 1

    def __post_init__(self):
        if self.bytes_per_token <= 0:
            raise ValueError("bytes_per_token must be positive")
        if self.hbm_for_kv_bytes <= 0:
            raise ValueError("hbm_for_kv_bytes must be positive")
        if self.attention not in ("GQA", "MHA"):
            raise ValueError(f"attention must be GQA or MHA, got {self.attention!r}")
        if self.gpus_per_instance < 1:
            raise ValueError("gpus_per_instance must be >= 1")

    def blocks_in_hbm(self, block_tokens: int) -> int:
        """Whole KV blocks of ``block_tokens`` tokens that fit in the KV budget."""
        return int(self.hbm_for_kv_bytes // (self.bytes_per_token * block_tokens))
