"""Command-line entry point.

Subcommands: analyze, simulate, sweep, fit, generate, capacity. Every run
writes its outputs plus ``manifest.json`` into ``--out``. Settings resolve as
command-line flags, then the ``--config`` file (TOML or JSON; top-level keys
plus an optional table named after the subcommand), then built-in defaults.
A previous run's manifest is also accepted as ``--config``.

Exit codes: 0 success, 1 data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from kvtrace import __version__, analysis, distfit
from kvtrace.cachesim import POLICIES, CostModel, TierConfig, Workload, simulate
from kvtrace.trace import (
    AS_RECORDED,
    BUILTIN_PROFILES,
    ModelProfile,
    SpecError,
    TraceFormatError,
    generate_synthetic,
    load_profile,
    load_spec,
    read_trace,
    scale_trace,
    write_trace,
)
from kvtrace.trace.generator import DELTA
from kvtrace.trace.io import sniff_format

SCHEMA_VERSION = 1
LOG_ENV = "KVTRACE_LOG_LEVEL"
EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("kvtrace")

METRICS = (
    "ideal-hit",
    "reuse-skew",
    "per-type",
    "cross-user",
    "user-skew",
    "turns",
    "next-turn",
    "reuse-time",
    "spatial",
    "lifespan",
    "kv-size",
    "capacity",
)
EXTRA_METRICS = ("fit-stability",)
SWEEP_RATIOS = (0.0, 1.0, 2.0, 4.0)

DEFAULTS = {
    "common": {"seed": 0, "format": None, "out": "out", "block_tokens": 16, "profile": None, "scale": 1.0},
    "analyze": {
        "metric": ["all"],
        "block_tokens": 4,
        "top_k": 20,
        "window": 600.0,
        "profiles": ["qwen2-7b", "llama2-13b", "llama3-70b"],
        "step": 60.0,
        "include_outputs": True,
        "day_length": 86400.0,
        "hours": None,
    },
    "simulate": {
        "policy": "wa",
        "device_capacity": None,
        "host_capacity": None,
        "host_ratio": 1.0,
        "device_hit_cost": 0.0,
        "host_hit_cost": 0.1,
        "miss_cost": 1.0,
        "fit_window": distfit.DEFAULT_WINDOW,
        "fit_refresh": distfit.DEFAULT_REFRESH,
        "life_mode": "snapshot",
        "instances": 1,
        "routing": "affinity",
        "decode_delay": 0.0,
    },
    "fit": {"window": distfit.DEFAULT_WINDOW, "refresh": distfit.DEFAULT_REFRESH, "min_samples": distfit.MIN_SAMPLES},
    "generate": {"spec": None, "view": AS_RECORDED, "name": None},
    "capacity": {"block_tokens": 4, "step": 60.0, "profile": "qwen2-7b"},
}
DEFAULTS["sweep"] = dict(DEFAULTS["simulate"], policies=list(POLICIES), ratios=list(SWEEP_RATIOS), jobs=1)
for _k in ("policy", "host_capacity", "host_ratio"):
    del DEFAULTS["sweep"][_k]


class UsageError(Exception):
    """Bad flags, config values or paths (exit 2)."""


class DataError(Exception):
    """Unreadable or invalid input data (exit 1)."""


# ------------------------------------------------------------------ config


def _load_config_file(path: str) -> dict:
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    try:
        if path.lower().endswith(".toml"):
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            with open(path, "rb") as fh:
                obj = tomllib.load(fh)
        else:
            with open(path, encoding="utf-8") as fh:
                obj = json.load(fh)
    except (ValueError, OSError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(obj, dict):
        raise UsageError(f"config {path} must be a table/object")
    if obj.get("tool") == "kvtrace" and isinstance(obj.get("config"), dict):
        obj = obj["config"]  # a run manifest
    return obj


def resolve_config(command: str, flags: dict, config_path: str | None) -> dict:
    """Merge defaults, config file and explicitly given flags."""
    cfg = dict(DEFAULTS["common"])
    cfg.update(DEFAULTS[command])
    if config_path:
        raw = _load_config_file(config_path)
        known = set(cfg) | {"trace"}
        for k, v in raw.items():
            if isinstance(v, dict):
                continue
            if k in ("command", "config"):
                continue
            if k not in known:
                raise UsageError(f"unknown config key {k!r}")
            cfg[k] = v
        section = raw.get(command, {})
        if not isinstance(section, dict):
            raise UsageError(f"config section {command!r} must be a table")
        for k, v in section.items():
            if k not in known:
                raise UsageError(f"unknown config key {command}.{k}")
            cfg[k] = v
    for k, v in flags.items():
        if v is not None:
            cfg[k] = v
    cfg["command"] = command
    return cfg


# ---------------------------------------------------------------- manifest


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    config: dict
    inputs: dict = field(default_factory=dict)  # path -> sha256
    outputs: list = field(default_factory=list)
    started_at: float = 0.0
    finished_at: float = 0.0
    version: str = __version__
    exit_code: int = 0

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "tool": "kvtrace",
            "version": self.version,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": sorted(self.outputs),
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "exit_code": self.exit_code,
        }


class Outputs:
    """Writes run outputs into one directory and remembers their names."""

    def __init__(self, root: str, inputs: set):
        self.root = root
        self.names: list[str] = []
        self._inputs = {os.path.realpath(p) for p in inputs}

    def path(self, name: str) -> str:
        p = os.path.join(self.root, name)
        if os.path.realpath(p) in self._inputs:
            raise UsageError(f"refusing to overwrite input file {p}")
        d = os.path.dirname(p)
        if d:
            os.makedirs(d, exist_ok=True)
        self.names.append(name)
        return p

    def text(self, name: str, content: str) -> None:
        with open(self.path(name), "w", encoding="utf-8", newline="") as fh:
            fh.write(content)

    def json(self, name: str, obj: dict) -> None:
        obj = dict(obj)
        obj.setdefault("schema_version", SCHEMA_VERSION)
        self.text(name, json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if np.isfinite(x) else None
    return x


# ------------------------------------------------------------------ inputs


def _load_trace(cfg: dict):
    path = cfg.get("trace")
    if not path:
        raise UsageError("--trace is required")
    fmt = cfg.get("format") or sniff_format(path)
    if fmt not in ("csv", "jsonl"):
        raise UsageError(f"unknown trace format {fmt!r}")
    records, diags = read_trace(path, fmt)
    if diags:
        for d in diags[:50]:
            print(f"{path}: {d}", file=sys.stderr)
        if len(diags) > 50:
            print(f"{path}: ... {len(diags) - 50} more", file=sys.stderr)
        raise DataError(f"{len(diags)} invalid row(s) in {path}")
    scale = float(cfg.get("scale") or 1.0)
    if scale <= 0:
        raise UsageError("--scale must be positive")
    if scale != 1.0:
        records = scale_trace(records, scale)
    log.info("loaded %d records from %s", len(records), path)
    return records


def _profile(name: str | None) -> ModelProfile | None:
    if name is None:
        return None
    if str(name).lower() not in BUILTIN_PROFILES and not os.path.isfile(name):
        raise UsageError(f"model profile not found: {name}")
    try:
        return load_profile(name)
    except (KeyError, ValueError) as exc:
        raise DataError(f"invalid model profile {name}: {exc}") from None


_UNITS = {
    "b": 1,
    "kb": 1e3,
    "mb": 1e6,
    "gb": 1e9,
    "tb": 1e12,
    "kib": 1 << 10,
    "mib": 1 << 20,
    "gib": 1 << 30,
    "tib": 1 << 40,
}


def parse_capacity(value, profile: ModelProfile | None, block_tokens: int) -> int:
    """Capacity in blocks from ``1024``, ``1024blocks``, ``8GB``, ``2GiB``
    or ``1.5hbm`` (multiples of the profile's KV budget)."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        if value < 0 or value != int(value):
            raise UsageError(f"capacity must be a non-negative whole number of blocks, got {value}")
        return int(value)
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+(?:[eE][+-]?[0-9]+)?)\s*([A-Za-z]*)\s*", str(value))
    if not m:
        raise UsageError(f"cannot parse capacity {value!r}")
    num, unit = float(m.group(1)), m.group(2).lower()
    if unit in ("", "block", "blocks"):
        if num != int(num):
            raise UsageError(f"block capacity must be whole, got {value!r}")
        return int(num)
    if unit in _UNITS or unit == "hbm":
        if profile is None:
            raise UsageError(f"capacity {value!r} uses byte units; pass --profile")
        nbytes = num * (profile.hbm_for_kv_bytes if unit == "hbm" else _UNITS[unit])
        return int(nbytes // (profile.bytes_per_token * block_tokens))
    raise UsageError(f"unknown capacity unit {m.group(2)!r}")


def _device_blocks(cfg: dict, profile: ModelProfile | None) -> int:
    bt = int(cfg["block_tokens"])
    if cfg.get("device_capacity") is None:
        if profile is None:
            raise UsageError("give --device-capacity or --profile")
        return profile.blocks_in_hbm(bt)
    return parse_capacity(cfg["device_capacity"], profile, bt)


def _cost(cfg: dict) -> CostModel:
    try:
        return CostModel(float(cfg["device_hit_cost"]), float(cfg["host_hit_cost"]), float(cfg["miss_cost"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------- commands


def _write_dist(out: Outputs, name: str, d: analysis.DistributionTable) -> dict:
    out.text(f"{name}.csv", d.to_csv())
    return d.summary()


def cmd_analyze(cfg: dict, out: Outputs) -> None:
    metrics = cfg["metric"]
    if isinstance(metrics, str):
        metrics = [metrics]
    if "all" in metrics:
        metrics = list(METRICS) + [m for m in metrics if m in EXTRA_METRICS]
    for m in metrics:
        if m not in METRICS + EXTRA_METRICS:
            raise UsageError(f"unknown metric {m!r}")
    records = _load_trace(cfg)
    view = analysis.TraceView(records, int(cfg["block_tokens"]), include_outputs=bool(cfg["include_outputs"]))
    base = {"block_tokens": view.block_tokens, "include_outputs": view.include_outputs, "requests": len(records)}

    for m in metrics:
        log.info("metric %s", m)
        summary = dict(base, metric=m)
        if m == "ideal-hit":
            summary.update(analysis.ideal_hit_ratio(view).to_dict())
        elif m == "reuse-skew":
            c = analysis.reuse_skew(view)
            out.text("reuse_skew.csv", c.to_csv())
            summary["reuse_share_at_10pct_blocks"] = c.at(0.1) if c.x.size else None
        elif m == "per-type":
            summary.update(analysis.per_type_contribution(view))
        elif m == "cross-user":
            h = analysis.cross_user_matrix(view, int(cfg["top_k"]))
            out.text("cross_user.csv", h.to_csv())
            summary.update(h.meta)
        elif m == "user-skew":
            curves = analysis.user_skew(view)
            for k, c in curves.items():
                out.text(f"user_skew_{k}.csv", c.to_csv())
            req = curves["requests"]
            summary["users"] = int(req.x.size)
        elif m == "turns":
            d, per_user = analysis.turn_distribution(view)
            summary["sessions"] = _write_dist(out, "turns", d)
            summary["max_turns"] = float(d.values[-1]) if d.count else None
            out.text("turns_per_user_by_mean.csv", per_user.to_csv())
            out.text("turns_per_user_by_std.csv", per_user.sorted_by("std").to_csv())
        elif m == "next-turn":
            h = analysis.next_turn_frequency(view, float(cfg["window"]))
            out.text("next_turn.csv", h.to_csv())
            summary["window"] = float(cfg["window"])
            summary["row_means"] = {
                r: (float(np.nanmean(v)) if np.any(~np.isnan(v)) else None) for r, v in zip(h.row_labels, h.values)
            }
        elif m == "reuse-time":
            groups = {}
            for g, fname in (("overall", "overall"), ("turn", "turn"), ("category", "category")):
                for k, d in analysis.reuse_time_distribution(view, g).items():
                    groups[f"{fname}/{k}"] = _write_dist(out, f"reuse_time/{fname}_{k}", d)
            summary["groups"] = groups
        elif m == "spatial":
            h = analysis.spatial_heatmap(view)
            out.text("spatial.csv", h.to_csv())
            summary.update(h.meta)
        elif m == "lifespan":
            summary["lifespan"] = _write_dist(out, "lifespan", analysis.lifespan_distribution(view))
            h = analysis.lifespan_timeline(view, float(cfg["window"]))
            out.text("lifespan_timeline.csv", h.to_csv())
        elif m == "kv-size":
            profiles = [_profile(p) for p in cfg["profiles"]]
            dists = analysis.kv_size_distribution(view, profiles)
            summary["distributions"] = {
                f"{p}/{kind}": _write_dist(out, f"kv_size/{p}_{kind}", d) for (p, kind), d in dists.items()
            }
        elif m == "capacity":
            curve = analysis.clairvoyant_capacity_curve(view, step=float(cfg["step"]))
            out.text("capacity.csv", curve.to_csv())
            summary.update(_capacity_summary(view, curve, None))
        elif m == "fit-stability":
            summary.update(_fit_stability(view, cfg, out))
        out.json(f"{m.replace('-', '_')}.json", summary)


def _fit_stability(view, cfg: dict, out: Outputs) -> dict:
    t = view.log.time
    if t.size == 0:
        return {"rows": 0}
    day = float(cfg["day_length"])
    t0 = float(t[0])
    starts = [t0 + k * day for k in range(int((t[-1] - t0) // day) + 1)]
    hours = cfg["hours"] if cfg["hours"] is not None else list(range(int(min(24, day // 3600))))
    pairs = distfit.stability_windows(starts, [int(h) for h in hours])
    rows = distfit.fit_stability_report(view.log, pairs, turn_cap=view.turn_cap)
    lines = ["category,window_a_start,window_b_start,ks,lambda_a,lambda_b,lambda_diff,n_a,n_b"]
    f = lambda x: "" if x is None else repr(float(x))  # noqa: E731
    for r in rows:
        lines.append(
            f"{r.category},{r.window_a[0]!r},{r.window_b[0]!r},{f(r.ks)},{f(r.lambda_a)},{f(r.lambda_b)},"
            f"{f(r.lambda_diff)},{r.n_a},{r.n_b}"
        )
    out.text("fit_stability.csv", "\n".join(lines) + "\n")
    ks = [r.ks for r in rows if r.ks is not None]
    return {"rows": len(rows), "days": len(starts), "mean_ks": float(np.mean(ks)) if ks else None}


def _capacity_summary(view, curve, profile) -> dict:
    life = analysis.block_lifespans(view)
    s = {
        "block_tokens": curve.block_tokens,
        "integral_block_seconds": curve.integral(),
        "lifespan_sum_block_seconds": float(life.sum()),
        "peak_blocks": int(curve.levels.max()) if curve.levels.size else 0,
    }
    if profile is not None:
        peak_bytes = s["peak_blocks"] * curve.block_tokens * profile.bytes_per_token
        s["profile"] = profile.name
        s["peak_bytes"] = peak_bytes
        s["peak_hbm_multiple"] = peak_bytes / profile.hbm_for_kv_bytes
    return s


def _run_one(args):
    records, tier, policy, cost, kw = args
    rep = simulate(records, tier, policy, cost, **kw)
    return rep.to_dict()


def _sim_kwargs(cfg: dict) -> dict:
    return {
        "fit_window": float(cfg["fit_window"]),
        "fit_refresh": float(cfg["fit_refresh"]),
        "life_mode": cfg["life_mode"],
        "instances": int(cfg["instances"]),
        "routing": cfg["routing"],
        "decode_delay": float(cfg["decode_delay"]),
    }


def cmd_simulate(cfg: dict, out: Outputs) -> None:
    profile = _profile(cfg.get("profile"))
    bt = int(cfg["block_tokens"])
    dev = _device_blocks(cfg, profile)
    if cfg.get("host_capacity") is not None:
        host = parse_capacity(cfg["host_capacity"], profile, bt)
    else:
        host = int(round(float(cfg["host_ratio"]) * dev))
    try:
        tier = TierConfig(dev, host, bt)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    policy = str(cfg["policy"]).lower().replace("-", "")
    if policy not in POLICIES + ("clairvoyant",):
        raise UsageError(f"unknown policy {cfg['policy']!r}")
    cost = _cost(cfg)
    records = _load_trace(cfg)
    try:
        rep = simulate(records, tier, policy, cost, **_sim_kwargs(cfg))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out.json("simulate.json", rep.to_dict())


def cmd_sweep(cfg: dict, out: Outputs) -> None:
    profile = _profile(cfg.get("profile"))
    bt = int(cfg["block_tokens"])
    dev = _device_blocks(cfg, profile)
    policies = [str(p).lower().replace("-", "") for p in cfg["policies"]]
    for p in policies:
        if p not in POLICIES + ("clairvoyant",):
            raise UsageError(f"unknown policy {p!r}")
    ratios = [float(r) for r in cfg["ratios"]]
    if any(r < 0 for r in ratios):
        raise UsageError("host ratios must be non-negative")
    cost = _cost(cfg)
    records = _load_trace(cfg)
    kw = _sim_kwargs(cfg)
    jobs = [(records, TierConfig(dev, int(round(r * dev)), bt), p, cost, kw) for p in policies for r in ratios]
    n = max(1, int(cfg["jobs"]))
    if n == 1:
        results = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(n) as pool:
            results = list(pool.map(_run_one, jobs))
    lines = ["policy,host_ratio,device_blocks,host_blocks,hit_ratio,device_hits,host_hits,misses,cost_total"]
    for (_, tier, p, _, _), r, ratio in zip(jobs, results, [r for _ in policies for r in ratios]):
        lines.append(
            f"{p},{ratio!r},{tier.device_capacity_blocks},{tier.host_capacity_blocks},{r['hit_ratio']!r},"
            f"{r['device_hits']},{r['host_hits']},{r['misses']},{float(r['cost_total'])!r}"
        )
    out.text("sweep.csv", "\n".join(lines) + "\n")


def cmd_fit(cfg: dict, out: Outputs) -> None:
    window, refresh = float(cfg["window"]), float(cfg["refresh"])
    if window <= 0 or refresh <= 0:
        raise UsageError("--window and --refresh must be positive")
    records = _load_trace(cfg)
    wl = Workload.from_records(records, int(cfg["block_tokens"]))
    snaps = distfit.refresh_fits(wl.log, refresh, window, min_samples=int(cfg["min_samples"]))
    index = []
    for k, snap in enumerate(snaps):
        name = f"fits/fit_{k:05d}.json"
        out.json(name, snap.to_dict(wl.turn_cap))
        index.append({"file": name, "snapshot_time": snap.snapshot_time})
    out.json("fits.json", {"window": window, "refresh": refresh, "snapshots": index})


def cmd_generate(cfg: dict, out: Outputs) -> None:
    if not cfg.get("spec"):
        raise UsageError("--spec is required")
    if not os.path.isfile(cfg["spec"]):
        raise UsageError(f"generator spec not found: {cfg['spec']}")
    view = cfg["view"]
    if view not in (AS_RECORDED, DELTA):
        raise UsageError(f"unknown view {view!r}")
    fmt = cfg.get("format") or "csv"
    if fmt not in ("csv", "jsonl"):
        raise UsageError(f"unknown trace format {fmt!r}")
    try:
        spec = load_spec(cfg["spec"])
    except (SpecError, ValueError, OSError) as exc:
        raise DataError(f"invalid generator spec: {exc}") from None
    records = generate_synthetic(spec, int(cfg["seed"]), view)
    name = cfg.get("name") or f"trace.{fmt}"
    write_trace(records, out.path(name), fmt)
    log.info("wrote %d records", len(records))


def cmd_capacity(cfg: dict, out: Outputs) -> None:
    profile = _profile(cfg.get("profile"))
    records = _load_trace(cfg)
    view = analysis.TraceView(records, int(cfg["block_tokens"]))
    curve = analysis.clairvoyant_capacity_curve(view, step=float(cfg["step"]))
    out.text("capacity.csv", curve.to_csv(profile))
    out.json("capacity.json", _capacity_summary(view, curve, profile))


COMMANDS = {
    "analyze": cmd_analyze,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "fit": cmd_fit,
    "generate": cmd_generate,
    "capacity": cmd_capacity,
}


# ------------------------------------------------------------------ parser


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kvtrace", description="KV-cache trace analysis and cache simulation")
    p.add_argument("--version", action="version", version=f"kvtrace {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, trace=True):
        if trace:
            sp.add_argument("--trace", help="input trace (csv or jsonl)")
        sp.add_argument("--out", help="output directory (default: out)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--format", choices=("csv", "jsonl"), help="trace format (default: from file extension)")
        sp.add_argument("--config", help="TOML/JSON config file or a previous manifest.json")
        sp.add_argument("--block-tokens", dest="block_tokens", type=int, help="tokens per block (multiple of 4)")
        sp.add_argument("--profile", help="model profile JSON or built-in name")
        if trace:
            sp.add_argument("--scale", type=float, help="QPS scaling factor applied to the trace")

    a = sub.add_parser("analyze", help="workload characterizations")
    common(a)
    a.add_argument("--metric", action="append", choices=("all",) + METRICS + EXTRA_METRICS)
    a.add_argument("--top-k", dest="top_k", type=int)
    a.add_argument("--window", type=float, help="time window in seconds (default 600)")
    a.add_argument("--profiles", type=_csv_list, help="comma-separated profiles for kv-size")
    a.add_argument("--step", type=float, help="capacity curve grid step in seconds")
    a.add_argument("--no-outputs", dest="include_outputs", action="store_const", const=False,
                   help="do not count blocks produced as outputs as reusable")

    def sim_args(sp):
        sp.add_argument("--device-capacity", dest="device_capacity",
                        help="device tier size: blocks, bytes (8GB, 2GiB) or HBM multiples (1hbm)")
        sp.add_argument("--device-hit-cost", dest="device_hit_cost", type=float)
        sp.add_argument("--host-hit-cost", dest="host_hit_cost", type=float)
        sp.add_argument("--miss-cost", dest="miss_cost", type=float)
        sp.add_argument("--fit-window", dest="fit_window", type=float)
        sp.add_argument("--fit-refresh", dest="fit_refresh", type=float)
        sp.add_argument("--life-mode", dest="life_mode", choices=("snapshot", "per_eviction"))
        sp.add_argument("--instances", type=int)
        sp.add_argument("--routing", choices=("affinity", "round_robin"))
        sp.add_argument("--decode-delay", dest="decode_delay", type=float, help="seconds per output token")

    s = sub.add_parser("simulate", help="replay a trace through a two-tier cache")
    common(s)
    sim_args(s)
    s.add_argument("--policy", choices=POLICIES + ("clairvoyant",))
    s.add_argument("--host-capacity", dest="host_capacity", help="host tier size (same units as device)")
    s.add_argument("--host-ratio", dest="host_ratio", type=float, help="host size as a multiple of the device size")

    w = sub.add_parser("sweep", help="policies x host/device ratios")
    common(w)
    sim_args(w)
    w.add_argument("--policies", type=_csv_list)
    w.add_argument("--ratios", type=_float_list)
    w.add_argument("--jobs", type=int, help="worker processes")

    f = sub.add_parser("fit", help="sliding-window exponential reuse fits")
    common(f)
    f.add_argument("--window", type=float)
    f.add_argument("--refresh", type=float)
    f.add_argument("--min-samples", dest="min_samples", type=int)

    g = sub.add_parser("generate", help="synthesize a trace from a generator spec")
    common(g, trace=False)
    g.add_argument("--spec")
    g.add_argument("--view", choices=(AS_RECORDED, DELTA))
    g.add_argument("--name", help="output file name inside --out")

    c = sub.add_parser("capacity", help="clairvoyant working-set size over time")
    common(c)
    c.add_argument("--step", type=float)
    return p


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    ns = parser.parse_args(argv)
    flags = {k: v for k, v in vars(ns).items() if k not in ("command", "config")}
    started = time.time()
    try:
        cfg = resolve_config(ns.command, flags, ns.config)
        if cfg.get("block_tokens") is not None and (int(cfg["block_tokens"]) <= 0 or int(cfg["block_tokens"]) % 4):
            raise UsageError("--block-tokens must be a positive multiple of 4")
        inputs = {}
        for key in ("trace", "spec", "profile"):
            path = cfg.get(key)
            if not path:
                continue
            if key == "profile" and str(path).lower() in BUILTIN_PROFILES and not os.path.exists(path):
                continue
            if not os.path.isfile(path):
                raise UsageError(f"{key} file not found: {path}")
            inputs[path] = sha256_file(path)
        out = Outputs(cfg["out"], set(inputs))
        os.makedirs(cfg["out"], exist_ok=True)
        COMMANDS[ns.command](cfg, out)
        code = EXIT_OK
    except UsageError as exc:
        print(f"kvtrace: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, TraceFormatError) as exc:
        print(f"kvtrace: data error: {exc}", file=sys.stderr)
        code = EXIT_DATA
        if "out" not in locals():
            return code
    manifest = RunManifest(cfg, inputs, out.names, started, time.time(), exit_code=code)
    with open(os.path.join(cfg["out"], "manifest.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(_jsonable(manifest.to_dict()), indent=2, sort_keys=True) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
