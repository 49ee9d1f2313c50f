"""Two-tier block cache simulation with pluggable eviction policies."""

from kvtrace.cachesim.entries import DEVICE, HOST, BlockEntry, CostModel, EmptyTierError, TierConfig
from kvtrace.cachesim.policies import (
    BASELINES,
    POLICIES,
    WACoefficients,
    choose_victim_fifo,
    choose_victim_gdfs,
    choose_victim_lfu,
    choose_victim_lru,
    gdfs_priority,
    make_policy,
    wa_choose_victim_fast,
    wa_choose_victim_scan,
    wa_priority,
)
from kvtrace.cachesim.simulator import (
    CacheState,
    SimReport,
    Workload,
    ideal_policy_reference,
    route_request,
    simulate,
)
