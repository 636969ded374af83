"""Experiment families and metric export.

Each family produces MetricRecord rows; exports are byte-stable for a
given record set so identical (config, seed) runs diff clean.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

from . import protocols as proto
from .config import RunConfig
from .engine import RngStreams, US_PER_MS, ms_to_us
from .netmodel import LatencyOracle, generate_topology
from .runner import RunResult, Simulation

UNIT_MS = "ms"
UNIT_TPS = "TPS"
UNIT_RATIO = "ratio"
UNIT_COUNT = "count"

CSV_HEADER = "family,protocol,scale,parameter,value,unit,seed,repetition"


@dataclass(frozen=True)
class MetricRecord:
    family: str
    protocol: str
    scale: int
    parameter: str
    value: float
    unit: str
    seed: int
    repetition: int

    def csv_row(self) -> str:
        return (f"{self.family},{self.protocol},{self.scale},{self.parameter},"
                f"{self.value:.3f},{self.unit},{self.seed},{self.repetition}")

    def json_obj(self) -> dict:
        return {
            "family": self.family, "protocol": self.protocol, "scale": self.scale,
            "parameter": self.parameter, "value": round(self.value, 3),
            "unit": self.unit, "seed": self.seed, "repetition": self.repetition,
        }


def sort_key(rec: MetricRecord):
    return (rec.family, rec.protocol, rec.scale, rec.parameter,
            rec.seed, rec.repetition, rec.unit, rec.value)


# --- trace reductions -------------------------------------------------------------

def sync_curve(trace: proto.PropagationTrace, block_id: int, n_online: int,
               born_us: int, ratios: Iterable[float]) -> list[tuple[float, Optional[float]]]:
    """Time (ms since birth) for each reception ratio; None when unreached."""
    arrivals = sorted(trace.first_arrival.get(block_id, {}).values())
    out = []
    for r in ratios:
        need = math.ceil(r * n_online)
        if need <= 0:
            out.append((r, 0.0))
        elif need > len(arrivals):
            out.append((r, None))
        else:
            out.append((r, (arrivals[need - 1] - born_us) / US_PER_MS))
    return out


def time_to_ratio(result: RunResult, block_id: int, ratio: float) -> Optional[float]:
    born = next(b.born_us for b in result.blocks if b.id == block_id)
    n_online = result.n_online_at_birth[block_id]
    curve = sync_curve(result.trace, block_id, n_online, born, [ratio])
    return curve[0][1]


def full_delay(result: RunResult) -> tuple[Optional[float], int]:
    """Mean ms for blocks to reach every online node; incomplete blocks are
    excluded and counted."""
    times = []
    incomplete = 0
    for block in result.blocks:
        t = time_to_ratio(result, block.id, 1.0)
        if t is None:
            incomplete += 1
        else:
            times.append(t)
    if not times:
        return None, incomplete
    return sum(times) / len(times), incomplete


def mean_time_to_ratio(result: RunResult, ratio: float) -> Optional[float]:
    times = []
    for block in result.blocks:
        t = time_to_ratio(result, block.id, ratio)
        if t is not None:
            times.append(t)
    return sum(times) / len(times) if times else None


# --- runs --------------------------------------------------------------------------

def broadcast_run(cfg: RunConfig, protocol: str, seed: int, *, n=None,
                  topology_kind=None, block_size_mb=None, topo=None, oracle=None,
                  blocks=None) -> RunResult:
    sim = Simulation(cfg, protocol, seed, n=n, topology_kind=topology_kind,
                     block_size_mb=block_size_mb, topo=topo, oracle=oracle)
    return sim.run_broadcasts(blocks=blocks)


def _shared_underlay(cfg: RunConfig, seed: int, n=None, kind=None):
    streams = RngStreams(seed)
    topo = generate_topology(cfg.topology_spec(kind=kind, n=n), streams.stream("topology"))
    oracle = LatencyOracle(topo)
    return topo, oracle


# --- families ----------------------------------------------------------------------

def run_family(cfg: RunConfig, workers: int = 1) -> list[MetricRecord]:
    if cfg.family not in FAMILY_RUNNERS:
        raise ValueError(f"unknown family {cfg.family!r}")
    if workers > 1:
        records = _run_parallel(cfg, workers)
    else:
        records = _serial(cfg)
    return sorted(records, key=sort_key)


def _family_units(cfg: RunConfig) -> list[tuple]:
    """(seed, scale/kind/size...) work units for the family, for the pool."""
    units = []
    if cfg.family in ("sync-curve", "full-delay"):
        units = [(seed, None, None, None) for seed in cfg.seeds]
    elif cfg.family == "size-sweep":
        units = [(seed, None, None, None) for seed in cfg.seeds]
    elif cfg.family in ("throughput-scale", "scalability"):
        units = [(seed, scale, None, None) for seed in cfg.seeds for scale in cfg.scales]
    elif cfg.family == "topology-adapt":
        units = [(seed, None, kind, None) for seed in cfg.seeds for kind in cfg.topology_kinds]
    elif cfg.family == "fork-adapt":
        units = [(seed, None, None, None) for seed in cfg.seeds]
    return units


def _run_unit(args) -> list[MetricRecord]:
    cfg, unit = args
    seed, scale, kind, _ = unit
    if cfg.family == "sync-curve":
        return _sync_curve_unit(cfg, seed)
    if cfg.family == "full-delay":
        return _full_delay_unit(cfg, seed)
    if cfg.family == "size-sweep":
        return _size_sweep_unit(cfg, seed)
    if cfg.family == "throughput-scale":
        return _throughput_unit(cfg, seed, scale)
    if cfg.family == "scalability":
        return _scalability_unit(cfg, seed, scale)
    if cfg.family == "topology-adapt":
        return _topology_unit(cfg, seed, kind)
    if cfg.family == "fork-adapt":
        return _fork_unit(cfg, seed)
    raise ValueError(cfg.family)


def _run_parallel(cfg: RunConfig, workers: int) -> list[MetricRecord]:
    import multiprocessing as mp
    units = _family_units(cfg)
    with mp.get_context("spawn").Pool(workers) as pool:
        chunks = pool.map(_run_unit, [(cfg, u) for u in units])
    return [rec for chunk in chunks for rec in chunk]


def _serial(cfg: RunConfig) -> list[MetricRecord]:
    out = []
    for unit in _family_units(cfg):
        out.extend(_run_unit((cfg, unit)))
    return out


def _sync_curve_unit(cfg: RunConfig, seed: int) -> list[MetricRecord]:
    records = []
    topo, oracle = _shared_underlay(cfg, seed)
    for rep in range(cfg.repetitions):
        for protocol in cfg.protocols:
            result = broadcast_run(cfg, protocol, seed, topo=topo, oracle=oracle)
            for ratio in cfg.sync_ratios:
                per_block = []
                for block in result.blocks:
                    t = time_to_ratio(result, block.id, ratio)
                    if t is not None:
                        per_block.append(t)
                if per_block:
                    records.append(MetricRecord(
                        cfg.family, protocol, cfg.n, f"{ratio:g}",
                        sum(per_block) / len(per_block), UNIT_MS, seed, rep))
    return records


def _full_delay_unit(cfg: RunConfig, seed: int) -> list[MetricRecord]:
    records = []
    topo, oracle = _shared_underlay(cfg, seed)
    for rep in range(cfg.repetitions):
        for protocol in cfg.protocols:
            result = broadcast_run(cfg, protocol, seed, topo=topo, oracle=oracle)
            delay, incomplete = full_delay(result)
            if delay is not None:
                records.append(MetricRecord(cfg.family, protocol, cfg.n, "full",
                                            delay, UNIT_MS, seed, rep))
            if incomplete:
                records.append(MetricRecord(cfg.family, protocol, cfg.n, "incomplete",
                                            float(incomplete), UNIT_COUNT, seed, rep))
    return records


def _size_sweep_unit(cfg: RunConfig, seed: int) -> list[MetricRecord]:
    records = []
    topo, oracle = _shared_underlay(cfg, seed)
    for rep in range(cfg.repetitions):
        for protocol in cfg.protocols:
            for size in cfg.block_sizes_mb:
                result = broadcast_run(cfg, protocol, seed, block_size_mb=size,
                                       topo=topo, oracle=oracle)
                delay, _ = full_delay(result)
                if delay is not None:
                    records.append(MetricRecord(cfg.family, protocol, cfg.n, f"{size:g}",
                                                delay, UNIT_MS, seed, rep))
    return records


def _throughput_unit(cfg: RunConfig, seed: int, scale: int) -> list[MetricRecord]:
    from .chain import throughput_tps
    records = []
    topo, oracle = _shared_underlay(cfg, seed, n=scale)
    for rep in range(cfg.repetitions):
        for protocol in cfg.protocols:
            sim = Simulation(cfg, protocol, seed, n=scale, topo=topo, oracle=oracle)
            result = sim.run_throughput()
            n_online = sum(1 for v in sim.online.values() if v)
            reach = {b.id: result.trace.reach(b.id) for b in result.blocks}
            tps = throughput_tps(result.blocks, reach, n_online,
                                 cfg.throughput_window_s, cfg.propagation_threshold)
            records.append(MetricRecord(cfg.family, protocol, scale, "",
                                        tps, UNIT_TPS, seed, rep))
    return records


def _scalability_unit(cfg: RunConfig, seed: int, scale: int) -> list[MetricRecord]:
    records = []
    topo, oracle = _shared_underlay(cfg, seed, n=scale)
    for rep in range(cfg.repetitions):
        for protocol in cfg.protocols:
            result = broadcast_run(cfg, protocol, seed, n=scale, topo=topo, oracle=oracle)
            t95 = mean_time_to_ratio(result, cfg.propagation_threshold)
            if t95 is not None:
                records.append(MetricRecord(cfg.family, protocol, scale, "",
                                            t95, UNIT_MS, seed, rep))
    return records


def _topology_unit(cfg: RunConfig, seed: int, kind: str) -> list[MetricRecord]:
    records = []
    topo, oracle = _shared_underlay(cfg, seed, kind=kind)
    for rep in range(cfg.repetitions):
        for protocol in cfg.protocols:
            result = broadcast_run(cfg, protocol, seed, topology_kind=kind,
                                   block_size_mb=cfg.topology_block_mb,
                                   topo=topo, oracle=oracle)
            t95 = mean_time_to_ratio(result, cfg.propagation_threshold)
            if t95 is not None:
                records.append(MetricRecord(cfg.family, protocol, cfg.n, kind,
                                            t95, UNIT_MS, seed, rep))
    return records


@dataclass
class ForkScenarioResult:
    pre_delay_ms: float
    post_delay_ms: float
    degraded_delay_ms: float
    pre_rate: float
    degraded_rate: float
    trigger_epoch: Optional[int]
    degrade_epoch: int
    records: list[MetricRecord] = field(default_factory=list)


def run_fork_scenario(cfg: RunConfig, seed: int, *, n: Optional[int] = None,
                      degrade_fraction: float = 0.2, degrade_factor: float = 3.0,
                      ) -> ForkScenarioResult:
    """Latency degradation scenario: produce continuously, degrade a slice of
    links, watch the fork rate rise, the trigger fire, and delay recover after
    reconfiguration."""
    from .chain import produce_schedule
    from .netmodel import degrade_links

    sim = Simulation(cfg, proto.BLOCKSDN, seed, n=n)
    period_ms = cfg.control_period_s * 1000.0
    window_ms = cfg.fork_window_s * 1000.0
    warm_ms = cfg.warmup_s * 1000.0
    pre_ms = warm_ms + 2 * window_ms
    degrade_at_ms = pre_ms
    post_ms = degrade_at_ms + 2 * window_ms + 2 * period_ms
    end_ms = post_ms + 2 * window_ms

    rng = sim.streams.stream("production")
    producers = sorted(u for u in sim.topo.nodes if sim.online[u])
    weights = [sim.topo.nodes[u].compute for u in producers]
    rate = cfg.throughput_rate_per_node * len(producers)
    schedule = produce_schedule(ms_to_us(end_ms - warm_ms), rate, producers, weights, rng)
    for t, producer in schedule:
        sim.produce_block(producer, at_us=t + ms_to_us(warm_ms))

    def apply_degradation(event):
        degrade_links(sim.topo, degrade_fraction, degrade_factor,
                      sim.streams.stream("degradation"))
        sim.oracle.invalidate()

    sim.loop.register("degrade", apply_degradation)
    sim.loop.schedule(ms_to_us(degrade_at_ms), "degrade")

    sim.loop.run(until_ms=end_ms)
    sim.stop_ticks()
    result = sim.run_quiescence()

    def phase_delay(lo_ms: float, hi_ms: float) -> float:
        times = []
        for block in result.blocks:
            born_ms = block.born_us / 1000.0
            if lo_ms <= born_ms < hi_ms:
                t = time_to_ratio(result, block.id, 1.0)
                if t is not None:
                    times.append(t)
        return sum(times) / len(times) if times else float("nan")

    # ticks fire at (epoch-1) * period, so this epoch was current at degradation
    degrade_epoch = int(degrade_at_ms // period_ms) + 1
    trigger_epoch = None
    for epoch in result.reconfig_epochs:
        if epoch > degrade_epoch:
            trigger_epoch = epoch
            break

    pre_rate = _rate_near(result.fork_rates, degrade_at_ms, before=True)
    degraded_rate = _max_rate_between(result.fork_rates, degrade_at_ms, post_ms + window_ms)
    pre = phase_delay(warm_ms + window_ms, degrade_at_ms)
    degraded = phase_delay(degrade_at_ms + 1000.0, post_ms)
    post = phase_delay(post_ms, end_ms)
    return ForkScenarioResult(pre, post, degraded, pre_rate, degraded_rate,
                              trigger_epoch, degrade_epoch)


def _rate_near(rates: list[tuple[float, float]], t_ms: float, before: bool) -> float:
    candidates = [r for t, r in rates if (t <= t_ms if before else t > t_ms)]
    return candidates[-1] if before and candidates else (candidates[0] if candidates else 0.0)


def _max_rate_between(rates: list[tuple[float, float]], lo_ms: float, hi_ms: float) -> float:
    window = [r for t, r in rates if lo_ms < t <= hi_ms]
    return max(window) if window else 0.0


def _fork_unit(cfg: RunConfig, seed: int) -> list[MetricRecord]:
    res = run_fork_scenario(cfg, seed)
    records = [
        MetricRecord(cfg.family, proto.BLOCKSDN, cfg.n, "pre-delay", res.pre_delay_ms,
                     UNIT_MS, seed, 0),
        MetricRecord(cfg.family, proto.BLOCKSDN, cfg.n, "degraded-delay",
                     res.degraded_delay_ms, UNIT_MS, seed, 0),
        MetricRecord(cfg.family, proto.BLOCKSDN, cfg.n, "post-delay", res.post_delay_ms,
                     UNIT_MS, seed, 0),
        MetricRecord(cfg.family, proto.BLOCKSDN, cfg.n, "pre-rate", res.pre_rate,
                     UNIT_RATIO, seed, 0),
        MetricRecord(cfg.family, proto.BLOCKSDN, cfg.n, "degraded-rate", res.degraded_rate,
                     UNIT_RATIO, seed, 0),
    ]
    if res.trigger_epoch is not None:
        records.append(MetricRecord(cfg.family, proto.BLOCKSDN, cfg.n, "trigger-epoch",
                                    float(res.trigger_epoch), UNIT_COUNT, seed, 0))
    return records


FAMILY_RUNNERS = ("sync-curve", "full-delay", "size-sweep", "throughput-scale",
                  "scalability", "topology-adapt", "fork-adapt")


# --- export ---------------------------------------------------------------------------

def export_csv(records: list[MetricRecord], path: str) -> None:
    if not records:
        raise ValueError("no records to export")
    rows = [CSV_HEADER] + [r.csv_row() for r in sorted(records, key=sort_key)]
    with open(path, "w") as fh:
        fh.write("\n".join(rows) + "\n")


def export_jsonl(records: list[MetricRecord], path: str) -> None:
    if not records:
        raise ValueError("no records to export")
    with open(path, "w") as fh:
        for rec in sorted(records, key=sort_key):
            fh.write(json.dumps(rec.json_obj(), sort_keys=True) + "\n")


def parse_csv(path: str) -> list[MetricRecord]:
    records = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 8:
                raise ValueError(f"{path}:{lineno}: expected 8 columns")
            records.append(MetricRecord(
                parts[0], parts[1], int(parts[2]), parts[3], float(parts[4]),
                parts[5], int(parts[6]), int(parts[7])))
    return records


def write_manifest(cfg: RunConfig, path: str, version: str) -> None:
    """A manifest is a loadable config plus provenance comments."""
    with open(path, "w") as fh:
        fh.write(f"# blocksdn-sim manifest (code version {version})\n")
        fh.write("# re-run with: blocksdn run --config <this file>\n")
        fh.write(cfg.to_text())
