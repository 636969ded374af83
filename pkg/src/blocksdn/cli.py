"""Command-line entry point: run experiments, generate/check topologies,
inspect traces, compare record files.

Exit codes: 0 ok, 2 config/input error, 3 runtime abort, 4 topology
check violations.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from typing import Optional

from . import __version__
from . import experiments as exp
from .config import ConfigError, RunConfig, load_config
from .engine import EventBudgetExceeded, RngStreams
from .netmodel import (TopologyError, check_topology, generate_topology,
                       load_topology, save_topology)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_CHECK = 4


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        out[key.strip()] = value.strip()
    return out


def cmd_run(args) -> int:
    overrides = {}
    try:
        overrides = _parse_overrides(args.set or [])
        for name in ("family", "protocols", "seeds", "out_dir", "workers", "topology"):
            value = getattr(args, name, None)
            if value is not None:
                overrides[name] = str(value)
        if args.seed is not None:
            overrides["seeds"] = str(args.seed)
        if args.trace:
            overrides["write_traces"] = "true"
        cfg = load_config(args.config, overrides)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    os.makedirs(cfg.out_dir, exist_ok=True)
    try:
        records = exp.run_family(cfg, workers=cfg.workers)
    except EventBudgetExceeded as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (TopologyError, MemoryError) as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if not records:
        print("runtime abort: family produced no records", file=sys.stderr)
        return EXIT_RUNTIME
    base = os.path.join(cfg.out_dir, f"{cfg.family}")
    try:
        exp.export_csv(records, base + ".csv")
        if args.jsonl:
            exp.export_jsonl(records, base + ".jsonl")
        exp.write_manifest(cfg, base + ".manifest", __version__)
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if cfg.write_traces:
        _write_traces(cfg)
    print(f"wrote {len(records)} records to {base}.csv")
    return EXIT_OK


def _write_traces(cfg: RunConfig) -> None:
    """Re-run the first (protocol, seed) combination recording a trace file."""
    from .protocols import export_trace_lines
    from .runner import Simulation
    seed = cfg.seeds[0]
    for protocol in cfg.protocols:
        sim = Simulation(cfg, protocol, seed)
        result = sim.run_broadcasts()
        path = os.path.join(cfg.out_dir, f"{cfg.family}_{protocol}_{seed}.trace")
        with open(path, "w") as fh:
            fh.write("\n".join(export_trace_lines(result.trace)) + "\n")
        forks_path = path.replace(".trace", ".forks")
        with open(forks_path, "w") as fh:
            for fe in result.chain.forks:
                fh.write(f"{fe.node} {fe.height} {fe.block_ids[0]} {fe.block_ids[1]} "
                         f"{fe.at_us / 1000.0:.3f}\n")


def cmd_topo(args) -> int:
    if args.check:
        try:
            topo = load_topology(args.check, kind=args.kind or "zoned-random")
        except (TopologyError, FileNotFoundError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        problems = check_topology(topo, kind=args.kind,
                                  expected_depth=args.depth,
                                  expected_rings=args.rings)
        if problems:
            for p in problems:
                print(f"violation: {p}", file=sys.stderr)
            return EXIT_CHECK
        print(f"ok: {topo.n} nodes, {len(topo.links)} links, connected")
        return EXIT_OK

    try:
        overrides = _parse_overrides(args.set or [])
        if args.kind:
            overrides["topology"] = args.kind
        if args.n:
            overrides["n"] = str(args.n)
        cfg = load_config(args.config, overrides)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        streams = RngStreams(cfg.seed)
        topo = generate_topology(cfg.topology_spec(), streams.stream("topology"))
    except TopologyError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not args.out:
        print("config error: --out required", file=sys.stderr)
        return EXIT_CONFIG
    save_topology(topo, args.out)
    print(f"wrote {topo.n} nodes, {len(topo.links)} links to {args.out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .protocols import parse_trace_lines
    try:
        with open(args.trace) as fh:
            trace = parse_trace_lines(fh)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {args.trace}: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    blocks = sorted(trace.first_arrival)
    report: dict = {}
    if args.query == "sync-curve":
        ratios = (0.2, 0.5, 0.95, 1.0)
        for bid in blocks:
            if args.block is not None and bid != args.block:
                continue
            arrivals = sorted(trace.first_arrival[bid].values())
            born = arrivals[0] if arrivals else 0
            n = len(arrivals)
            curve = []
            for r in ratios:
                need = max(1, math.ceil(r * n))
                curve.append((r, (arrivals[need - 1] - born) / 1000.0))
            report[bid] = curve
        if not args.json:
            print("block ratio ms")
            for bid, curve in report.items():
                for r, ms in curve:
                    print(f"{bid} {r:g} {ms:.3f}")
    elif args.query == "arrivals":
        for bid in blocks:
            if args.block is not None and bid != args.block:
                continue
            report[bid] = {node: at / 1000.0 for node, at in
                           sorted(trace.first_arrival[bid].items())}
        if not args.json:
            print("block node arrival_ms")
            for bid, per in report.items():
                for node, ms in per.items():
                    print(f"{bid} {node} {ms:.3f}")
    elif args.query == "duplicates":
        report = {"duplicate_blocks": trace.dup_blocks,
                  "deliveries": sum(len(v) for v in trace.first_arrival.values())}
        if not args.json:
            print(f"duplicate_blocks {trace.dup_blocks}")
            print(f"deliveries {report['deliveries']}")
    elif args.query == "forks":
        forks_path = args.trace.replace(".trace", ".forks")
        entries = []
        if os.path.exists(forks_path):
            with open(forks_path) as fh:
                for line in fh:
                    parts = line.split()
                    if len(parts) == 5:
                        entries.append({"node": int(parts[0]), "height": int(parts[1]),
                                        "blocks": [int(parts[2]), int(parts[3])],
                                        "at_ms": float(parts[4])})
        report = {"forks": entries}
        if not args.json:
            print(f"fork_events {len(entries)}")
            for e in entries:
                print(f"{e['node']} {e['height']} {e['blocks']} {e['at_ms']}")
    if args.json:
        print(json.dumps(report, sort_keys=True, default=str))
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        records = []
        for path in args.records:
            records.extend(exp.parse_csv(path))
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not records:
        print("error: no records", file=sys.stderr)
        return EXIT_CONFIG
    groups: dict = {}
    for rec in records:
        groups.setdefault((rec.family, rec.scale, rec.parameter, rec.unit), {}) \
              .setdefault(rec.protocol, []).append(rec.value)
    baseline = args.baseline
    print("family scale parameter unit protocol mean ratio_vs_" + baseline)
    for key in sorted(groups):
        family, scale, parameter, unit = key
        per = groups[key]
        base_mean = None
        if baseline in per:
            base_mean = sum(per[baseline]) / len(per[baseline])
        for protocol in sorted(per):
            mean = sum(per[protocol]) / len(per[protocol])
            ratio = f"{mean / base_mean:.3f}" if base_mean else "-"
            print(f"{family} {scale} {parameter or '-'} {unit} {protocol} "
                  f"{mean:.3f} {ratio}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blocksdn",
        description="Discrete-event simulator for SDN-coordinated block broadcast")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment family")
    run.add_argument("--config", help="flat key=value config file")
    run.add_argument("--family", help="experiment family")
    run.add_argument("--protocols", help="comma-separated protocol list")
    run.add_argument("--seeds", help="comma-separated seed list")
    run.add_argument("--seed", type=int, help="single seed shorthand")
    run.add_argument("--topology", help="underlay kind")
    run.add_argument("--out-dir", dest="out_dir", help="output directory")
    run.add_argument("--workers", type=int, help="parallel worker processes")
    run.add_argument("--trace", action="store_true", help="write propagation traces")
    run.add_argument("--jsonl", action="store_true", help="also write JSON lines")
    run.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override any config key")
    run.set_defaults(func=cmd_run)

    topo = sub.add_parser("topo", help="generate or check a topology file")
    topo.add_argument("--config", help="config file for generator parameters")
    topo.add_argument("--kind", help="topology kind")
    topo.add_argument("--n", type=int, help="node count")
    topo.add_argument("--out", help="output edge-list path")
    topo.add_argument("--check", metavar="PATH", help="verify an existing file")
    topo.add_argument("--depth", type=int, help="expected tree depth for --check")
    topo.add_argument("--rings", type=int, help="expected local rings for --check")
    topo.add_argument("--set", action="append", metavar="KEY=VALUE")
    topo.set_defaults(func=cmd_topo)

    inspect = sub.add_parser("inspect", help="query a propagation trace")
    inspect.add_argument("trace", help="trace file path")
    inspect.add_argument("--query", required=True,
                         choices=("sync-curve", "arrivals", "duplicates", "forks"))
    inspect.add_argument("--block", type=int, help="restrict to one block id")
    inspect.add_argument("--json", action="store_true")
    inspect.set_defaults(func=cmd_inspect)

    compare = sub.add_parser("compare", help="tabulate protocol ratios from records")
    compare.add_argument("records", nargs="+", help="record CSV files")
    compare.add_argument("--baseline", default="gossip")
    compare.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
