"""Run configuration: one flat dataclass, a flat key=value file format,
and CLI-over-file-over-default resolution. A resolved config serializes to
a manifest that reproduces the run exactly.
"""
from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, fields
from typing import Any, Optional, get_args, get_origin

from .netmodel import KINDS, TopologySpec

FAMILIES = ("sync-curve", "full-delay", "size-sweep", "throughput-scale",
            "scalability", "topology-adapt", "fork-adapt")

OUT_DIR_ENV = "BLOCKSDN_OUT"


class ConfigError(ValueError):
    """Invalid configuration; message lists every offending key at once."""


@dataclass
class RunConfig:
    # experiment
    family: str = "full-delay"
    protocols: tuple[str, ...] = ("blocksdn", "mercury", "gossip")
    topology: str = "zoned-random"
    n: int = 1000
    scales: tuple[int, ...] = (5000, 6000, 7000, 8000)
    block_size_mb: float = 1.0
    block_sizes_mb: tuple[float, ...] = (0.5, 1.0, 2.0, 3.0)
    sync_ratios: tuple[float, ...] = (0.20, 0.50, 0.95, 1.00)
    topology_kinds: tuple[str, ...] = ("ring", "star", "tree")
    topology_block_mb: float = 0.1
    seed: int = 1
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    repetitions: int = 1
    out_dir: str = ""
    workers: int = 1
    write_traces: bool = False

    # underlay defaults (zoned-random; see TopologySpec for kind extras)
    zones: int = 10
    intra_latency_lo_ms: float = 5.0
    intra_latency_hi_ms: float = 30.0
    inter_latency_lo_ms: float = 50.0
    inter_latency_hi_ms: float = 150.0
    bw_choices: tuple[float, ...] = (50.0, 100.0, 500.0, 1000.0)
    bw_weights: tuple[float, ...] = (0.3, 0.4, 0.2, 0.1)
    compute_choices: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    compute_weights: tuple[float, ...] = (0.2, 0.5, 0.2, 0.1)
    intra_degree: float = 4.0
    inter_links_per_zone_pair: int = 2
    local_rings: int = 10
    tree_depth: int = 5
    latency_scale: float = 1.0

    # protocol parameters
    overlay_degree: int = 8           # k
    gossip_fanout: int = 4            # f <= k
    gossip_blind_push: bool = False
    gossip_lazy_delay_ms: float = 400.0  # second announce wave to remaining peers
    backbone_degree: int = 8          # k_b cap; effective min(k_b, clusters-1)
    inbound_cap_ratio: float = 1.5
    target_cluster_size: int = 50
    cluster_cap_factor: float = 2.0
    capacity_weight_bw: float = 0.6
    capacity_weight_compute: float = 0.4
    max_push_children: int = 8
    micro_cross_announce: bool = False

    # control plane
    controllers: int = 2
    control_period_s: float = 10.0
    link_noise: float = 0.05
    micro_interval_s: float = 30.0
    micro_degradation_factor: float = 2.0
    ewma_alpha: float = 0.3
    fork_high_threshold: float = 0.05
    fork_relative_increase: float = 0.5
    fork_window_s: float = 200.0

    # chain
    validation_ms_per_mb: float = 50.0
    tx_per_mb: int = 2000
    propagation_threshold: float = 0.95

    # run shape
    blocks_per_run: int = 3
    block_spacing_s: float = 8.0
    warmup_s: float = 12.0
    throughput_window_s: float = 20.0
    throughput_rate_per_node: float = 0.0004
    announce_kb: float = 1.0
    control_kb: float = 2.0
    event_budget: int = 20_000_000

    def resolve(self) -> "RunConfig":
        """Fill derived defaults and validate; idempotent."""
        cfg = dataclasses.replace(self)
        if not cfg.out_dir:
            cfg.out_dir = os.environ.get(OUT_DIR_ENV, "out")
        problems = []
        if cfg.family not in FAMILIES:
            problems.append(f"family: unknown {cfg.family!r} (choose from {', '.join(FAMILIES)})")
        for proto in cfg.protocols:
            if proto not in ("blocksdn", "mercury", "gossip"):
                problems.append(f"protocols: unknown protocol {proto!r}")
        if cfg.topology not in KINDS:
            problems.append(f"topology: unknown kind {cfg.topology!r}")
        for kind in cfg.topology_kinds:
            if kind not in KINDS:
                problems.append(f"topology_kinds: unknown kind {kind!r}")
        if cfg.n < 2:
            problems.append("n: need at least 2 nodes")
        if not cfg.protocols:
            problems.append("protocols: need at least one")
        if not cfg.seeds:
            problems.append("seeds: need at least one")
        if cfg.gossip_fanout > cfg.overlay_degree:
            problems.append("gossip_fanout: must not exceed overlay_degree")
        if cfg.target_cluster_size < 2:
            problems.append("target_cluster_size: must be >= 2")
        if cfg.controllers < 1:
            problems.append("controllers: need at least one controller")
        if not (0 <= cfg.link_noise < 1):
            problems.append("link_noise: must be in [0, 1)")
        if cfg.block_size_mb <= 0:
            problems.append("block_size_mb: must be positive")
        if cfg.repetitions < 1:
            problems.append("repetitions: must be >= 1")
        if cfg.family == "size-sweep" and not cfg.block_sizes_mb:
            problems.append("block_sizes_mb: required for size-sweep")
        if cfg.family in ("throughput-scale", "scalability") and not cfg.scales:
            problems.append("scales: required for this family")
        if problems:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
        return cfg

    def topology_spec(self, kind: Optional[str] = None, n: Optional[int] = None,
                      ) -> TopologySpec:
        return TopologySpec(
            kind=kind or self.topology,
            n=n or self.n,
            zones=self.zones,
            intra_latency=(self.intra_latency_lo_ms, self.intra_latency_hi_ms),
            inter_latency=(self.inter_latency_lo_ms, self.inter_latency_hi_ms),
            bw_choices=self.bw_choices,
            bw_weights=self.bw_weights,
            compute_choices=self.compute_choices,
            compute_weights=self.compute_weights,
            intra_degree=self.intra_degree,
            inter_links_per_zone_pair=self.inter_links_per_zone_pair,
            local_rings=self.local_rings,
            tree_depth=self.tree_depth,
            latency_scale=self.latency_scale,
        )

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {_format_value(value)}")
        return "\n".join(lines) + "\n"


def _format_value(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:g}"
    return str(value)


def _coerce(name: str, raw: str, ftype: Any) -> Any:
    raw = raw.strip()
    origin = get_origin(ftype)
    if origin is tuple:
        inner = get_args(ftype)[0]
        if raw == "":
            return ()
        return tuple(_coerce(name, part, inner) for part in raw.split(","))
    if ftype is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if ftype is int:
        return int(raw)
    if ftype is float:
        return float(raw)
    return raw


_FIELD_TYPES = typing.get_type_hints(RunConfig)
_REAL_TYPES = {f.name: f for f in fields(RunConfig)}


def _field_type(name: str):
    return _FIELD_TYPES[name]


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse flat `key = value` lines; unknown keys are all reported at once."""
    values: dict[str, Any] = {}
    unknown: list[str] = []
    errors: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            errors.append(f"{source}:{lineno}: expected 'key = value', got {line!r}")
            continue
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in _REAL_TYPES:
            unknown.append(key)
            continue
        try:
            values[key] = _coerce(key, val, _field_type(key))
        except (ValueError, ConfigError) as exc:
            errors.append(f"{source}:{lineno}: {key}: {exc}")
    if unknown:
        errors.append(f"{source}: unknown keys: {', '.join(sorted(set(unknown)))}")
    if errors:
        raise ConfigError("\n".join(errors))
    return values


def load_config(path: Optional[str] = None, overrides: Optional[dict[str, str]] = None,
                ) -> RunConfig:
    """Build a config with priority CLI overrides > file > defaults."""
    values: dict[str, Any] = {}
    if path:
        with open(path) as fh:
            values.update(parse_config_text(fh.read(), source=path))
    if overrides:
        unknown = [k for k in overrides if k not in _REAL_TYPES]
        if unknown:
            raise ConfigError(f"unknown keys: {', '.join(sorted(unknown))}")
        for key, raw in overrides.items():
            values[key] = _coerce(key, raw, _field_type(key))
    return RunConfig(**values).resolve()
