"""Discrete-event simulator for SDN-coordinated blockchain block broadcast.

Three strategies run on the same seeded underlay: random gossip, a
zone-tree structured baseline, and a controller-driven hierarchical
broadcast with resource-aware clustering and macro-micro neighbor
selection.
"""

__version__ = "0.1.0"

from .config import ConfigError, RunConfig, load_config
from .engine import EventLoop, RngStreams, SimEvent
from .netmodel import (LatencyOracle, PhysLink, PhysNode, PhysTopology,
                       TopologySpec, generate_topology, load_topology,
                       save_topology, transmission_delay_ms, underlay_latency_ms)
from .graphengine import (ClusterMap, GlobalView, build_view, capacity_scores,
                          elect_heads, layer_assignment, partition)
from .control import (ControlDomain, ForkRateWindow, NeighborRecommendation,
                      assign_domains, fork_feedback, recommend_all)
from .protocols import (BLOCKSDN, GOSSIP, MERCURY, NeighborSet, PropagationTrace,
                        build_gossip_overlay, build_mercury_plan, micro_refine,
                        redundancy)
from .chain import Block, ChainState, ForkEvent, produce_schedule, throughput_tps
from .runner import RunResult, Simulation
from .experiments import MetricRecord, full_delay, run_family, sync_curve
