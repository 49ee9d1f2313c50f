"""Per-model KV sizing."""

from __future__ import annotations

import json
import os
from typing import Union

from kvtrace.trace.types import ModelProfile

MiB = 1 << 20


def _kv_per_token(layers: int, kv_heads: int, head_dim: int, dtype_bytes: int = 2) -> int:
    # K and V, every layer
    return 2 * layers * kv_heads * head_dim * dtype_bytes


# KV budgets are per serving instance (HBM minus weights and activations).
BUILTIN_PROFILES = {
    "qwen2-7b": ModelProfile("qwen2-7b", "GQA", _kv_per_token(28, 4, 128), 62e9, 1),
    "llama2-13b": ModelProfile("llama2-13b", "MHA", _kv_per_token(40, 40, 128), 50e9, 1),
    "llama3-70b": ModelProfile("llama3-70b", "GQA", _kv_per_token(80, 8, 128), 170e9, 4),
}


def kv_bytes(profile: ModelProfile, token_count: int) -> float:
    if token_count < 0:
        raise ValueError("token_count must be non-negative")
    return token_count * profile.bytes_per_token


def normalized_hbm_fraction(profile: ModelProfile, token_count: int) -> float:
    return kv_bytes(profile, token_count) / profile.hbm_for_kv_bytes


def load_profile(spec: Union[str, os.PathLike]) -> ModelProfile:
    """Load a profile from a JSON file, or by built-in name."""
    key = os.fspath(spec)
    if key.lower() in BUILTIN_PROFILES and not os.path.exists(key):
        return BUILTIN_PROFILES[key.lower()]
    with open(key, encoding="utf-8") as fh:
        obj = json.load(fh)
    return ModelProfile(
        name=obj["name"],
        attention=obj.get("attention", "GQA"),
        bytes_per_token=float(obj["bytes_per_token"]),
        hbm_for_kv_bytes=float(obj["hbm_for_kv_bytes"]),
        gpus_per_instance=int(obj.get("gpus_per_instance", 1)),
    )


def profile_to_dict(profile: ModelProfile) -> dict:
    return {
        "name": profile.name,
        "attention": profile.attention,
        "bytes_per_token": profile.bytes_per_token,
        "hbm_for_kv_bytes": profile.hbm_for_kv_bytes,
        "gpus_per_instance": profile.gpus_per_instance,
    }
