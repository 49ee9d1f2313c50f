"""Trace records, parsing, session linking, prefix keys and synthesis."""

from kvtrace.trace.blocks import AccessLog, BlockedRequest, access_log, block_requests
from kvtrace.trace.generator import GeneratorSpec, SpecError, generate_synthetic, load_spec
from kvtrace.trace.hashing import DEFAULT_SEED, chain_keys, prefix_keys
from kvtrace.trace.io import Diagnostic, TraceFormatError, parse_trace, read_trace, serialize_trace, write_trace
from kvtrace.trace.profiles import BUILTIN_PROFILES, kv_bytes, load_profile, normalized_hbm_fraction
from kvtrace.trace.sessions import (
    AS_RECORDED,
    RECONSTRUCT,
    MissingAncestorError,
    SessionCycleError,
    expand_input,
    link_sessions,
    scale_trace,
)
from kvtrace.trace.types import (
    GROUP_TOKENS,
    TURN_CAP,
    ModelProfile,
    PrefixKey,
    RequestCategory,
    RequestType,
    Session,
    TraceRecord,
)
