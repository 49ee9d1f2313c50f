"""Deterministic synthetic trace generator.

A spec describes, per request type, a Poisson session-arrival rate, the
system prompt / suffix / output length distributions, a per-turn-bucket
continuation probability and the think time between turns. Users are drawn
from a Zipf distribution. System prompts come from a small per-user pool, or
with probability ``shared_prompt_prob`` from a pool shared by all users.

Spec files are TOML or JSON::

    spec_version = 1
    duration = 3600.0
    users = 100
    zipf = 1.1

    [[types]]
    type = "text"
    rate = 0.2                      # sessions per second
    system_prompt_tokens = 256      # bare number = constant
    suffix_tokens = {dist = "lognormal", median = 120, sigma = 0.6}
    output_tokens = {dist = "exp", mean = 200}
    next_turn_prob = [0.5, 0.8]     # per turn bucket, last value repeats
    think_time = {dist = "exp", mean = 60}

Distributions: ``const`` (value), ``exp`` (mean), ``uniform`` (low, high),
``lognormal`` (median, sigma), ``choice`` (values, optional weights). Token
draws are rounded to a multiple of 4 and clipped to ``min`` (default 0).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Any, Mapping, Union

import numpy as np

from kvtrace.trace.hashing import MASK64, fmix64
from kvtrace.trace.sessions import AS_RECORDED
from kvtrace.trace.types import GROUP_TOKENS, RequestType, TraceRecord

SPEC_VERSION = 1
DELTA = "delta"
MAX_TURNS = 256


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class Dist:
    kind: str
    params: tuple = ()
    weights: tuple = ()
    minimum: float = 0.0

    @classmethod
    def parse(cls, obj: Any, what: str = "distribution") -> "Dist":
        if isinstance(obj, (int, float)) and not isinstance(obj, bool):
            d = cls("const", (float(obj),))
        elif isinstance(obj, Mapping):
            kind = str(obj.get("dist", "const")).lower()
            lo = float(obj.get("min", 0.0))
            try:
                if kind == "const":
                    d = cls(kind, (float(obj["value"]),), minimum=lo)
                elif kind == "exp":
                    d = cls(kind, (float(obj["mean"]),), minimum=lo)
                elif kind == "uniform":
                    d = cls(kind, (float(obj["low"]), float(obj["high"])), minimum=lo)
                elif kind == "lognormal":
                    d = cls(kind, (float(obj["median"]), float(obj["sigma"])), minimum=lo)
                elif kind == "choice":
                    vals = tuple(float(v) for v in obj["values"])
                    w = tuple(float(v) for v in obj.get("weights", [1.0] * len(vals)))
                    d = cls(kind, vals, w, lo)
                else:
                    raise SpecError(f"{what}: unknown dist {kind!r}")
            except KeyError as exc:
                raise SpecError(f"{what}: missing parameter {exc.args[0]!r}") from None
        else:
            raise SpecError(f"{what}: expected a number or a table, got {obj!r}")
        d._check(what)
        return d

    def _check(self, what: str) -> None:
        p = self.params
        bad = (
            (self.kind == "const" and p[0] < 0)
            or (self.kind == "exp" and p[0] < 0)
            or (self.kind == "uniform" and not 0 <= p[0] <= p[1])
            or (self.kind == "lognormal" and (p[0] <= 0 or p[1] < 0))
            or (self.kind == "choice" and (not p or min(p) < 0 or len(self.weights) != len(p)
                                           or min(self.weights) < 0 or sum(self.weights) <= 0))
        )
        if bad:
            raise SpecError(f"{what}: invalid {self.kind} parameters {p}")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        p = self.params
        if self.kind == "const":
            x = np.full(n, p[0])
        elif self.kind == "exp":
            x = rng.exponential(p[0], n) if p[0] > 0 else np.zeros(n)
        elif self.kind == "uniform":
            x = rng.uniform(p[0], p[1], n)
        elif self.kind == "lognormal":
            x = rng.lognormal(np.log(p[0]), p[1], n)
        else:
            w = np.asarray(self.weights)
            x = np.asarray(p)[rng.choice(len(p), size=n, p=w / w.sum())]
        return np.maximum(x, self.minimum)

    def tokens(self, rng: np.random.Generator, n: int) -> np.ndarray:
        x = self.sample(rng, n)
        t = (np.rint(x / GROUP_TOKENS) * GROUP_TOKENS).astype(np.int64)
        floor = int(np.ceil(self.minimum / GROUP_TOKENS)) * GROUP_TOKENS
        return np.maximum(t, floor)


@dataclass(frozen=True)
class TypeSpec:
    request_type: RequestType
    rate: float
    system_prompt_tokens: Dist
    suffix_tokens: Dist
    output_tokens: Dist
    next_turn_prob: tuple
    think_time: tuple  # one Dist per turn bucket, last repeats

    def continue_prob(self, turn: int) -> float:
        return self.next_turn_prob[min(turn, len(self.next_turn_prob)) - 1]

    def think(self, turn: int) -> Dist:
        return self.think_time[min(turn, len(self.think_time)) - 1]


@dataclass(frozen=True)
class GeneratorSpec:
    types: tuple
    duration: float = 3600.0
    users: int = 100
    zipf: float = 1.0
    user_prompts: int = 2
    shared_prompts: int = 4
    shared_prompt_prob: float = 0.05
    spec_version: int = SPEC_VERSION

    @classmethod
    def from_dict(cls, obj: Mapping) -> "GeneratorSpec":
        version = obj.get("spec_version")
        if version != SPEC_VERSION:
            raise SpecError(f"unsupported spec_version {version!r} (expected {SPEC_VERSION})")
        raw_types = obj.get("types") or []
        if not raw_types:
            raise SpecError("spec declares no request types")
        types = []
        for i, t in enumerate(raw_types):
            where = f"types[{i}]"
            try:
                rtype = RequestType.parse(str(t["type"]))
                rate = float(t["rate"])
            except KeyError as exc:
                raise SpecError(f"{where}: missing {exc.args[0]!r}") from None
            except ValueError as exc:
                raise SpecError(f"{where}: {exc}") from None
            if rate < 0:
                raise SpecError(f"{where}: negative rate {rate}")
            ntp = t.get("next_turn_prob", 0.0)
            ntp = tuple(float(v) for v in (ntp if isinstance(ntp, (list, tuple)) else [ntp]))
            if not ntp or any(not 0 <= v <= 1 for v in ntp):
                raise SpecError(f"{where}: next_turn_prob values must lie in [0, 1]")
            think = t.get("think_time", 60.0)
            think = think if isinstance(think, (list, tuple)) else [think]
            if not think:
                raise SpecError(f"{where}: empty think_time list")
            types.append(
                TypeSpec(
                    rtype,
                    rate,
                    Dist.parse(t.get("system_prompt_tokens", 0), f"{where}.system_prompt_tokens"),
                    Dist.parse(t.get("suffix_tokens", 64), f"{where}.suffix_tokens"),
                    Dist.parse(t.get("output_tokens", 64), f"{where}.output_tokens"),
                    ntp,
                    tuple(Dist.parse(d, f"{where}.think_time") for d in think),
                )
            )
        spec = cls(
            types=tuple(types),
            duration=float(obj.get("duration", 3600.0)),
            users=int(obj.get("users", 100)),
            zipf=float(obj.get("zipf", 1.0)),
            user_prompts=int(obj.get("user_prompts", 2)),
            shared_prompts=int(obj.get("shared_prompts", 4)),
            shared_prompt_prob=float(obj.get("shared_prompt_prob", 0.05)),
            spec_version=version,
        )
        if spec.duration <= 0:
            raise SpecError("duration must be positive")
        if spec.users < 1:
            raise SpecError("users must be at least 1")
        if spec.zipf < 0:
            raise SpecError("zipf exponent must be non-negative")
        if spec.user_prompts < 1 or spec.shared_prompts < 1:
            raise SpecError("prompt pools must hold at least one prompt")
        if not 0 <= spec.shared_prompt_prob <= 1:
            raise SpecError("shared_prompt_prob must lie in [0, 1]")
        return spec


def load_spec(path: Union[str, os.PathLike]) -> GeneratorSpec:
    path = os.fspath(path)
    if path.lower().endswith(".json"):
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    else:
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            obj = tomllib.load(fh)
    return GeneratorSpec.from_dict(obj)


def zipf_weights(n: int, s: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -s
    return w / w.sum()


class _Groups:
    """Unique 64-bit group hashes from a counter through a bijective mixer."""

    def __init__(self, salt: int):
        self.next = 1
        self.salt = salt & MASK64

    def take(self, n_tokens: int) -> tuple:
        n = n_tokens // GROUP_TOKENS
        out = tuple(fmix64(self.salt ^ c) for c in range(self.next, self.next + n))
        self.next += n
        return out


@dataclass
class _Turn:
    time: float
    user: int
    rtype: RequestType
    parent: int  # index into the turn list, -1 for first turns
    history: tuple  # full input groups
    new_input: tuple  # groups introduced by this turn
    output: tuple


def generate_synthetic(spec: GeneratorSpec, seed: int = 0, view: str = AS_RECORDED) -> list[TraceRecord]:
    """Generate a trace; identical (spec, seed, view) gives identical records.

    ``view="as_recorded"`` stores the full concatenated history in each
    input; ``view="delta"`` stores only what each turn adds, so that
    reconstructing a delta trace yields the as-recorded one exactly.
    """
    if view not in (AS_RECORDED, DELTA):
        raise ValueError(f"unknown view {view!r}")
    rng = np.random.default_rng(seed)
    groups = _Groups(int(rng.integers(0, 1 << 63)))
    uw = zipf_weights(spec.users, spec.zipf)
    shared: dict = {}
    private: dict = {}
    turns: list[_Turn] = []

    def prompt(ts: TypeSpec, user: int) -> tuple:
        if rng.random() < spec.shared_prompt_prob:
            slot = ("s", ts.request_type, int(rng.integers(spec.shared_prompts)))
            pool = shared
        else:
            slot = (user, ts.request_type, int(rng.integers(spec.user_prompts)))
            pool = private
        if slot not in pool:
            pool[slot] = groups.take(int(ts.system_prompt_tokens.tokens(rng, 1)[0]))
        return pool[slot]

    for ts in spec.types:
        n = int(rng.poisson(ts.rate * spec.duration))
        starts = np.sort(rng.uniform(0.0, spec.duration, n))
        users = rng.choice(spec.users, size=n, p=uw)
        for start, user in zip(starts, users):
            t = round(float(start), 3)
            user = int(user)
            sys_groups = prompt(ts, user)
            history: tuple = ()
            parent = -1
            turn = 1
            while True:
                new = (sys_groups if turn == 1 else ()) + groups.take(int(ts.suffix_tokens.tokens(rng, 1)[0]))
                out = groups.take(int(ts.output_tokens.tokens(rng, 1)[0]))
                full = history + new
                turns.append(_Turn(t, user, ts.request_type, parent, full, new, out))
                parent = len(turns) - 1
                if turn >= MAX_TURNS or not rng.random() < ts.continue_prob(turn):
                    break
                gap = max(float(ts.think(turn).sample(rng, 1)[0]), 0.001)
                t = round(t + gap, 3)
                history = full + out
                turn += 1

    order = sorted(range(len(turns)), key=lambda i: (turns[i].time, i))
    width = max(6, len(str(len(turns))))
    ids = {}
    for rank, i in enumerate(order):
        ids[i] = f"c{rank:0{width}d}"
    uwidth = max(4, len(str(spec.users)))
    records = []
    for i in order:
        tr = turns[i]
        inp = tr.history if view == AS_RECORDED else tr.new_input
        records.append(
            TraceRecord(
                timestamp=tr.time,
                chat_id=ids[i],
                parent_chat_id=ids[tr.parent] if tr.parent >= 0 else None,
                user_id=f"u{tr.user:0{uwidth}d}",
                request_type=tr.rtype,
                input_token_count=len(inp) * GROUP_TOKENS,
                output_token_count=len(tr.output) * GROUP_TOKENS,
                input_group_hashes=inp,
                output_group_hashes=tr.output,
            )
        )
    return records
