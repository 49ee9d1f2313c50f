"""Block metadata and simulator configuration."""

from __future__ import annotations

from dataclasses import dataclass

DEVICE = 0
HOST = 1
GONE = -1
TIER_NAMES = {DEVICE: "device", HOST: "host"}


class EmptyTierError(LookupError):
    pass


class BlockEntry:
    """One resident block.

    ``offset`` is the block's index in the prefix, which is fixed by its key.
    ``category`` is the category of the most recent accessing request.
    ``insert_time`` and ``insert_seq`` are set when the block enters the
    cache hierarchy and survive moves between tiers.
    """

    __slots__ = (
        "key",
        "category",
        "offset",
        "last_access",
        "insert_time",
        "insert_seq",
        "frequency",
        "tier",
        "version",
        "last_req",
        "prio",
        "s3",
        "next_ref",
        "parent",
    )

    def __init__(self, key, category, offset, now, seq, req=-1):
        self.key = key
        self.category = category
        self.offset = offset
        self.last_access = now
        self.insert_time = now
        self.insert_seq = seq
        self.frequency = 1
        self.tier = GONE
        self.version = 0
        self.last_req = req
        self.prio = 0.0  # GDFS priority
        self.s3 = 0  # S3-FIFO counter
        self.next_ref = 0.0  # clairvoyant next-use position
        self.parent = None  # key of the preceding block in the prefix

    size_blocks = 1

    def __repr__(self) -> str:
        return (
            f"BlockEntry(key={self.key:#x}, cat={self.category}, off={self.offset}, "
            f"last={self.last_access}, ins={self.insert_time}, freq={self.frequency})"
        )


@dataclass(frozen=True)
class TierConfig:
    device_capacity_blocks: int
    host_capacity_blocks: int = 0
    sim_block_tokens: int = 16

    def __post_init__(self):
        if self.device_capacity_blocks < 1:
            raise ValueError("device capacity must be at least one block")
        if self.host_capacity_blocks < 0:
            raise ValueError("host capacity must be non-negative")
        if self.sim_block_tokens <= 0 or self.sim_block_tokens % 4:
            raise ValueError("sim_block_tokens must be a positive multiple of 4")


@dataclass(frozen=True)
class CostModel:
    device_hit_cost: float = 0.0
    host_hit_cost: float = 0.1
    miss_cost: float = 1.0

    def __post_init__(self):
        if not self.miss_cost >= self.host_hit_cost >= 0 or self.device_hit_cost < 0:
            raise ValueError("costs must satisfy miss >= host hit >= 0")
