"""One simulated run: a protocol, a seed, an underlay, and a block workload.

Transport model: a message leaving a node queues on that node's uplink
(serialization = size / uplink bw) and is delivered after the underlay
shortest-path latency plus serialization at the path's effective bandwidth.
That single queue is what produces hub, gateway, and cluster-head
bottlenecks; there is no other contention.

Broadcast strategies:
  gossip    random overlay; announce/request/block exchange to f random
            neighbors on first receipt (blind push optional).
  mercury   zone clusters with latency spanning trees; tree flooding plus a
            gateway mesh between clusters. Direct block push.
  blocksdn  controller-driven: origin pushes to its cluster head, heads relay
            over a backbone tree, members push down the layered intra-cluster
            plan. Direct block push; announces only on micro cross-links.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from . import chain as chain_mod
from . import control as control_mod
from . import graphengine as ge
from . import netmodel as nm
from . import protocols as proto
from .chain import ACCEPT, ChainState, DUPLICATE, ORPHANED, validation_delay_us
from .config import RunConfig
from .engine import (BLOCK_PRODUCTION, CONTROL_CYCLE_TICK, CONTROLLER_FAILURE,
                     EventLoop, MESSAGE_ARRIVAL, NODE_CHURN, RngStreams, RunSummary,
                     US_PER_MS, derive_seed, ms_to_us)
from .netmodel import (LatencyOracle, Message, MSG_BLOCK, MSG_CONTROL, MSG_INV,
                       MSG_REQUEST, PhysTopology, serialization_us)

FORWARD = "protocol-forward"
MICRO_TICK = "micro-refine-tick"
GOSSIP_LAZY = "gossip-lazy-announce"


@dataclass
class CycleLogEntry:
    epoch: int
    view_size: int
    cluster_count: int
    reconfigured: bool
    cause: str

    def line(self) -> str:
        return (f"epoch={self.epoch} view={self.view_size} clusters={self.cluster_count} "
                f"reconfig={'yes' if self.reconfigured else 'no'} cause={self.cause}")


@dataclass
class RunResult:
    protocol: str
    seed: int
    trace: proto.PropagationTrace
    blocks: list[chain_mod.Block]
    n_online_at_birth: dict[int, int]
    chain: ChainState
    control_log: list[CycleLogEntry]
    reconfig_epochs: list[int]
    fork_rates: list[tuple[float, float]]      # (window end ms, rate)
    ctl_messages: int
    ctl_bytes_mb: float
    summary: Optional[RunSummary] = None
    starvation: int = 0

    def sorted_deliveries(self):
        return sorted(self.trace.deliveries, key=lambda d: (d.block, d.node, d.arrival_us))


class Simulation:
    """Single-threaded, seed-deterministic simulation of one protocol run."""

    def __init__(self, cfg: RunConfig, protocol: str, seed: int, *,
                 topo: Optional[PhysTopology] = None,
                 oracle: Optional[LatencyOracle] = None,
                 n: Optional[int] = None,
                 topology_kind: Optional[str] = None,
                 block_size_mb: Optional[float] = None,
                 record_event_trace: bool = False):
        if protocol not in proto.PROTOCOLS:
            raise ValueError(f"unknown protocol {protocol!r}")
        self.cfg = cfg
        self.protocol = protocol
        self.seed = seed
        self.block_size_mb = block_size_mb if block_size_mb is not None else cfg.block_size_mb
        self.streams = RngStreams(seed)
        spec = cfg.topology_spec(kind=topology_kind, n=n)
        self.topo = topo if topo is not None else nm.generate_topology(
            spec, self.streams.stream("topology"))
        self.oracle = oracle if oracle is not None else LatencyOracle(self.topo)
        self.loop = EventLoop(event_budget=cfg.event_budget, record_trace=record_event_trace)
        self.loop.register(MESSAGE_ARRIVAL, self._on_message)
        self.loop.register(BLOCK_PRODUCTION, self._on_production)
        self.loop.register(CONTROL_CYCLE_TICK, self._on_control_tick)
        self.loop.register(NODE_CHURN, self._on_churn)
        self.loop.register(CONTROLLER_FAILURE, self._on_controller_failure)
        self.loop.register(FORWARD, self._on_forward)
        self.loop.register(MICRO_TICK, self._on_micro_tick)
        self.loop.register(GOSSIP_LAZY, self._on_gossip_lazy)

        self.online = {u: node.online for u, node in self.topo.nodes.items()}
        self.uplink_free: dict[int, int] = {u: 0 for u in self.topo.nodes}
        self.chain = ChainState()
        self.trace = proto.PropagationTrace()
        self.blocks: list[chain_mod.Block] = []
        self.n_online_at_birth: dict[int, int] = {}
        self._next_block_id = 1
        self._block_hops: dict[tuple[int, int], int] = {}
        self._requested: set[tuple[int, int]] = set()
        self._announced: dict[tuple[int, int], bool] = {}
        self._heard_from: dict[tuple[int, int], set[int]] = {}

        # control-plane state
        self.epoch = 0
        self.view: Optional[ge.GlobalView] = None
        self.cmap: Optional[ge.ClusterMap] = None
        self.scores: dict[int, float] = {}
        self.push_children: dict[int, list[int]] = {}
        self.backbone_recs: dict[int, control_mod.NeighborRecommendation] = {}
        self.node_recs: dict[int, control_mod.NeighborRecommendation] = {}
        self.node_sets: dict[int, proto.NeighborSet] = {}
        self._relay_cache: dict[tuple[int, int], dict[int, list[int]]] = {}
        self.control_log: list[CycleLogEntry] = []
        self.reconfig_epochs: list[int] = []
        self.fork_rates: list[tuple[float, float]] = []
        self._prev_fork_rate: Optional[float] = None
        self._pending_reconfig = True  # first cycle always configures
        self._reconfig_cause = "initial"
        self.ctl_messages = 0
        self.ctl_bytes_mb = 0.0
        self._ticks_enabled = True
        self._cycle_state: dict[int, dict] = {}
        self.controllers: list[int] = []
        self.ctl_active: dict[int, bool] = {}
        self.domains: dict[int, control_mod.ControlDomain] = {}
        self.stale_view_mode = False

        # protocol state
        self.overlay: dict[int, list[int]] = {}
        self.mercury_plan: Optional[proto.MercuryPlan] = None
        self._gw_meshed: set[int] = set()
        # blocks pin the structures current at their production, so a
        # reconfiguration mid-flight never strands an in-flight broadcast
        self._block_state: dict[int, tuple] = {}

        self._bootstrap()

    # --- setup -----------------------------------------------------------------

    def _topology_scores(self) -> dict[int, float]:
        nodes = self.topo.nodes
        bws = [nd.uplink_bw for nd in nodes.values()]
        cps = [nd.compute for nd in nodes.values()]
        lo_b, hi_b = min(bws), max(bws)
        lo_c, hi_c = min(cps), max(cps)
        out = {}
        for u, nd in nodes.items():
            nb = 0.5 if hi_b == lo_b else (nd.uplink_bw - lo_b) / (hi_b - lo_b)
            nc = 0.5 if hi_c == lo_c else (nd.compute - lo_c) / (hi_c - lo_c)
            out[u] = self.cfg.capacity_weight_bw * nb + self.cfg.capacity_weight_compute * nc
        return out

    def _bootstrap(self) -> None:
        cfg = self.cfg
        if self.protocol == proto.GOSSIP:
            ids = sorted(u for u in self.topo.nodes if self.online[u])
            self.overlay = proto.build_gossip_overlay(
                ids, cfg.overlay_degree, self.streams.stream("gossip-overlay"))
            return
        if self.protocol == proto.MERCURY:
            self._mercury_rebuild()
            self.loop.schedule(0, CONTROL_CYCLE_TICK)
            return
        ranked = sorted(self._topology_scores().items(), key=lambda kv: (-kv[1], kv[0]))
        count = min(cfg.controllers, len(ranked))
        self.controllers = sorted(u for u, _ in ranked[:count])
        self.ctl_active = {u: True for u in self.controllers}
        zones: dict[int, list[int]] = {}
        for u, nd in self.topo.nodes.items():
            if self.online[u]:
                zones.setdefault(nd.zone, []).append(u)
        pseudo = {z: sorted(mem) for z, mem in zones.items()}
        doms = control_mod.assign_domains(sorted(pseudo), self.controllers)
        for ctl, dom in doms.items():
            dom.nodes = sorted(u for z in dom.clusters for u in pseudo[z])
        self.domains = doms
        self.loop.schedule(0, CONTROL_CYCLE_TICK)
        self.loop.schedule(ms_to_us(cfg.micro_interval_s * 1000.0), MICRO_TICK)

    # --- transport ---------------------------------------------------------------

    def _send(self, src: int, dst: int, kind: str, size_mb: float, *,
              block=None, hops: int = 0, data=None) -> bool:
        if src == dst or not self.online.get(src) or not self.online.get(dst):
            return False
        lat = self.oracle.latency_us(src, dst)
        if lat is None:
            self.trace.unreached += 1
            return False
        now = self.loop.now_us
        sender = self.topo.nodes[src]
        start = max(now, self.uplink_free[src])
        self.uplink_free[src] = start + serialization_us(size_mb, sender.uplink_bw)
        eff_bw = min(sender.uplink_bw, self.oracle.bottleneck_bw(src, dst))
        arrive = start + lat + serialization_us(size_mb, eff_bw)
        msg = Message(kind, size_mb, src, dst, block=block, hops=hops,
                      sent_at_us=now, data=data)
        self.loop.schedule(arrive, MESSAGE_ARRIVAL, target=dst, data=msg)
        if kind == MSG_INV:
            self.trace.announces += 1
        elif kind == MSG_REQUEST:
            self.trace.requests += 1
        elif kind == MSG_BLOCK:
            self.trace.block_sends += 1
        else:
            self.ctl_messages += 1
            self.ctl_bytes_mb += size_mb
        return True

    def _announce_size(self) -> float:
        return self.cfg.announce_kb / 1024.0

    def _control_size(self) -> float:
        return self.cfg.control_kb / 1024.0

    # --- block lifecycle -----------------------------------------------------------

    def produce_block(self, producer: int, size_mb: Optional[float] = None,
                      at_us: Optional[int] = None) -> None:
        """Schedule one block production."""
        fire = self.loop.now_us if at_us is None else at_us
        self.loop.schedule(fire, BLOCK_PRODUCTION, target=producer,
                           data=size_mb if size_mb is not None else self.block_size_mb)

    def _on_production(self, event) -> None:
        producer = event.target
        if not self.online.get(producer):
            return
        now = self.loop.now_us
        size = event.data if event.data is not None else self.block_size_mb
        tx = round(self.cfg.tx_per_mb * size)
        block = self.chain.make_block(self._next_block_id, producer, size, tx, now)
        self._next_block_id += 1
        self.blocks.append(block)
        self.n_online_at_birth[block.id] = sum(1 for v in self.online.values() if v)
        self.trace.record_block(block.id, producer, now, 0)
        self._block_hops[(block.id, producer)] = 0
        self._pin_block_state(block.id)
        _, _, released = self.chain.receive(producer, block, now)
        self._forward(producer, block, received_from=None)
        for blk in released:
            delay = validation_delay_us(blk.size_mb, self.topo.nodes[producer].compute,
                                        self.cfg.validation_ms_per_mb)
            self.loop.schedule(now + delay, FORWARD, target=producer, data=(blk, None))

    def _on_message(self, event) -> None:
        msg: Message = event.data
        if not self.online.get(msg.dst):
            return
        if msg.kind == MSG_BLOCK:
            self._on_block_arrival(msg)
        elif msg.kind == MSG_INV:
            self._on_inv(msg)
        elif msg.kind == MSG_REQUEST:
            self._on_request(msg)
        elif msg.kind == MSG_CONTROL:
            self._on_control_message(msg)

    def _on_block_arrival(self, msg: Message) -> None:
        block: chain_mod.Block = msg.block
        node = msg.dst
        now = self.loop.now_us
        self._heard_from.setdefault((block.id, node), set()).add(msg.src)
        first = self.trace.record_block(block.id, node, now, msg.hops)
        ns = self.node_sets.get(node)
        if ns is not None and msg.src in ns.expected_ms:
            ns.observe(msg.src, (now - msg.sent_at_us) / US_PER_MS, self.cfg.ewma_alpha)
        if not first:
            return
        self._block_hops[(block.id, node)] = msg.hops
        outcome, _fork, released = self.chain.receive(node, block, now)
        to_forward = []
        if outcome == ACCEPT:
            to_forward.append(block)
        to_forward.extend(released)
        for blk in to_forward:
            delay = validation_delay_us(blk.size_mb, self.topo.nodes[node].compute,
                                        self.cfg.validation_ms_per_mb)
            self.loop.schedule(now + delay, FORWARD, target=node,
                               data=(blk, msg.src))

    def _on_forward(self, event) -> None:
        blk, received_from = event.data
        self._forward(event.target, blk, received_from)

    def _forward(self, node: int, block: chain_mod.Block, received_from: Optional[int]) -> None:
        if self.protocol == proto.GOSSIP:
            self._gossip_forward(node, block)
        elif self.protocol == proto.MERCURY:
            self._mercury_forward(node, block, received_from)
        else:
            self._bsdn_forward(node, block, received_from)

    def _hops_of(self, block_id: int, node: int) -> int:
        return self._block_hops.get((block_id, node), 0)

    def _pin_block_state(self, block_id: int) -> None:
        if self.protocol == proto.MERCURY:
            self._block_state[block_id] = (self.mercury_plan,)
        elif self.protocol == proto.BLOCKSDN:
            self._block_state[block_id] = (
                self.cmap, self.push_children, self.backbone_recs)

    # --- gossip ---------------------------------------------------------------------

    def _gossip_forward(self, node: int, block: chain_mod.Block) -> None:
        key = (block.id, node)
        if self._announced.get(key):
            return
        self._announced[key] = True
        rng = self.streams.stream("gossip-fanout")
        neighbors = [v for v in self.overlay.get(node, ()) if self.online.get(v)]
        f = min(self.cfg.gossip_fanout, len(neighbors))
        targets = rng.sample(neighbors, f) if f < len(neighbors) else list(neighbors)
        hops = self._hops_of(block.id, node) + 1
        kind = MSG_BLOCK if self.cfg.gossip_blind_push else MSG_INV
        size = block.size_mb if self.cfg.gossip_blind_push else self._announce_size()
        for v in sorted(targets):
            self._send(node, v, kind, size, block=block, hops=hops)
        if f < len(neighbors) and self.cfg.gossip_lazy_delay_ms > 0:
            # lazy wave: announce later to peers not covered by the eager push
            # and not already heard from, so connected overlays always converge
            self.loop.schedule(
                self.loop.now_us + ms_to_us(self.cfg.gossip_lazy_delay_ms),
                GOSSIP_LAZY, target=node, data=(block, frozenset(targets)))

    def _on_gossip_lazy(self, event) -> None:
        node = event.target
        block, eager = event.data
        if not self.online.get(node):
            return
        heard = self._heard_from.get((block.id, node), frozenset())
        hops = self._hops_of(block.id, node) + 1
        kind = MSG_BLOCK if self.cfg.gossip_blind_push else MSG_INV
        size = block.size_mb if self.cfg.gossip_blind_push else self._announce_size()
        for v in self.overlay.get(node, ()):
            if v in eager or v in heard or not self.online.get(v):
                continue
            self._send(node, v, kind, size, block=block, hops=hops)

    def _on_inv(self, msg: Message) -> None:
        block: chain_mod.Block = msg.block
        node = msg.dst
        key = (block.id, node)
        self._heard_from.setdefault(key, set()).add(msg.src)
        holds = node in self.trace.first_arrival.get(block.id, {})
        if holds or key in self._requested:
            self.trace.dup_announces += 1
            return
        self._requested.add(key)
        self._send(node, msg.src, MSG_REQUEST, self._announce_size(),
                   block=block, hops=msg.hops)

    def _on_request(self, msg: Message) -> None:
        block: chain_mod.Block = msg.block
        holder = msg.dst
        if holder not in self.trace.first_arrival.get(block.id, {}):
            return  # lost the block somehow; requester will stay unserved
        self._send(holder, msg.src, MSG_BLOCK, block.size_mb, block=block, hops=msg.hops)

    # --- mercury ---------------------------------------------------------------------

    def _mercury_rebuild(self) -> None:
        self.epoch += 1
        view = self._instant_view()
        self.view = view
        self.mercury_plan = proto.build_mercury_plan(view)

    def _mercury_forward(self, node: int, block: chain_mod.Block,
                         received_from: Optional[int]) -> None:
        pinned = self._block_state.get(block.id)
        plan = pinned[0] if pinned else self.mercury_plan
        if plan is None or node not in plan.cluster_of:
            return
        hops = self._hops_of(block.id, node) + 1
        via_tree = received_from is None or received_from in plan.tree_adj.get(node, ())
        if node == plan.gateway_of(node) and via_tree and block.id not in self._gw_meshed:
            self._gw_meshed.add(block.id)
            for cid in sorted(plan.gateways):
                gw = plan.gateways[cid]
                if gw != node:
                    self._send(node, gw, MSG_BLOCK, block.size_mb, block=block, hops=hops)
        for v in plan.tree_adj.get(node, ()):
            if v != received_from and self.online.get(v):
                self._send(node, v, MSG_BLOCK, block.size_mb, block=block, hops=hops)

    # --- blocksdn ----------------------------------------------------------------------

    def _acting_head(self, cmap: ge.ClusterMap, cid: int) -> Optional[int]:
        head, deputy = cmap.heads[cid]
        if self.online.get(head):
            return head
        if self.online.get(deputy):
            return deputy
        return None

    def _cluster_entry(self, cmap: ge.ClusterMap, cid: int) -> Optional[int]:
        """Where to deliver a block aimed at a cluster's head."""
        acting = self._acting_head(cmap, cid)
        if acting is not None:
            return acting
        for u in cmap.members[cid]:
            if self.online.get(u):
                return u
        return None

    def _relay_children(self, cmap: ge.ClusterMap, backbone_recs: dict,
                        origin_head: int) -> dict[int, list[int]]:
        key = (cmap.epoch, origin_head)
        tree = self._relay_cache.get(key)
        if tree is None:
            tree = proto.build_relay_tree(backbone_recs, origin_head,
                                          self.cfg.max_push_children)
            self._relay_cache[key] = tree
        return tree

    def _effective_children(self, plan: dict[int, list[int]], node: int,
                            skip: set[int]) -> list[int]:
        """Plan children of a node, descending through offline ones."""
        out = []
        stack = list(plan.get(node, ()))
        while stack:
            child = stack.pop(0)
            if child in skip:
                continue
            if self.online.get(child):
                out.append(child)
            else:
                stack.extend(plan.get(child, ()))
        return out

    def _bsdn_forward(self, node: int, block: chain_mod.Block,
                      received_from: Optional[int]) -> None:
        if self.cmap is None:
            return
        cmap = self.cmap
        if node not in cmap.cluster_of:
            return  # joined after the epoch snapshot; nothing to push
        cid = cmap.cluster_of[node]
        origin = block.producer
        origin_cid = cmap.cluster_of.get(origin, cid)
        origin_head = cmap.heads[origin_cid][0]
        hops = self._hops_of(block.id, node) + 1
        acting = self._acting_head(cid)
        headless = acting is None

        if headless:
            self._bsdn_cluster_gossip(node, block, cid, hops)
        else:
            skip = {origin}
            for child in self._effective_children(self.push_children, node, skip):
                self._send(node, child, MSG_BLOCK, block.size_mb, block=block, hops=hops)
            if node == acting and node != cmap.heads[cid][0]:
                # deputy stands in: cover the dead head's children too
                dead = cmap.heads[cid][0]
                for child in self._effective_children(self.push_children, dead, skip | {node}):
                    self._send(node, child, MSG_BLOCK, block.size_mb, block=block, hops=hops)

        relay_duty = (not headless and node == acting) or (headless and node == origin)
        if relay_duty:
            nominal = cmap.heads[cid][0]
            for target_head in self._relay_children(origin_head).get(nominal, ()):
                target_cid = cmap.cluster_of[target_head]
                entry = self._cluster_entry(target_cid)
                if entry is not None and entry != node:
                    self._send(node, entry, MSG_BLOCK, block.size_mb, block=block, hops=hops)

        if node == origin and not headless and node != acting:
            self._send(node, acting, MSG_BLOCK, block.size_mb, block=block, hops=hops)

        ns = self.node_sets.get(node)
        if self.cfg.micro_cross_announce and ns is not None:
            for peer in ns.peers:
                if ns.source.get(peer) == proto.SRC_MICRO and self.online.get(peer):
                    self._send(node, peer, MSG_INV, self._announce_size(),
                               block=block, hops=hops)

    def _bsdn_cluster_gossip(self, node: int, block: chain_mod.Block,
                             cid: int, hops: int) -> None:
        rng = self.streams.stream("bsdn-fallback")
        peers = [u for u in self.cmap.members[cid] if u != node and self.online.get(u)]
        f = min(self.cfg.gossip_fanout, len(peers))
        targets = rng.sample(peers, f) if f < len(peers) else peers
        for v in sorted(targets):
            self._send(node, v, MSG_INV, self._announce_size(), block=block, hops=hops)

    # --- blocksdn control plane ------------------------------------------------------

    def _instant_view(self) -> ge.GlobalView:
        """Ground-truth measurement snapshot with deterministic noise."""
        node_reports, link_reports = [], []
        for u, nd in self.topo.nodes.items():
            if not self.online[u]:
                continue
            node_reports.append(ge.NodeReport(self.epoch, ge.NodeRecord(
                u, nd.zone, nd.uplink_bw, nd.compute, True, self.topo.degree(u))))
        for link in self.topo.links:
            for reporter in (link.a, link.b):
                if not self.online.get(reporter):
                    continue
                metrics = self._measure_link(link, reporter)
                link_reports.append(ge.LinkReportMsg(self.epoch, metrics))
        return ge.build_view(node_reports, link_reports, self.epoch, self.epoch)

    def _measure_link(self, link: nm.PhysLink, reporter: int) -> nm.LinkMetrics:
        noise = self.cfg.link_noise
        if not link.up:
            return nm.LinkMetrics(link.a, link.b, None, reporter, up=False)
        eps = 0.0
        if noise > 0:
            eps = self.streams.fixed_uniform(
                f"link-noise:{self.epoch}:{link.a}:{link.b}:{reporter}", -noise, noise)
        measured = max(1, round(link.latency_us * (1.0 + eps)))
        return nm.LinkMetrics(link.a, link.b, measured, reporter, up=True)

    def _on_control_tick(self, event) -> None:
        cfg = self.cfg
        period_us = ms_to_us(cfg.control_period_s * 1000.0)
        if self.protocol == proto.MERCURY:
            if self._ticks_enabled:
                self._mercury_rebuild()
                self.loop.schedule(self.loop.now_us + period_us, CONTROL_CYCLE_TICK)
            return
        if self.protocol != proto.BLOCKSDN:
            return
        self._evaluate_fork_window()
        active = [c for c in self.controllers if self.ctl_active.get(c)]
        if not active:
            self.stale_view_mode = True
            self.control_log.append(CycleLogEntry(
                self.epoch, len(self.view.nodes) if self.view else 0,
                self.cmap.cluster_count if self.cmap else 0, False,
                "all-controllers-failed"))
        else:
            self.epoch += 1
            epoch = self.epoch
            state = {"node_reports": [], "link_reports": [],
                     "expected": {}, "got": {}, "summaries": {}, "done": False}
            self._cycle_state[epoch] = state
            self_reports = []
            for ctl in active:
                expected = 0
                for member in self.domains[ctl].nodes:
                    if member == ctl:
                        self_reports.append(ctl)
                        expected += 1
                    elif self._send(ctl, member, MSG_CONTROL, self._control_size(),
                                    data=("poll", epoch, ctl)):
                        expected += 1
                state["expected"][ctl] = expected
                state["got"].setdefault(ctl, 0)
            for ctl in active:
                if state["expected"][ctl] == 0:
                    self._controller_collected(ctl, epoch)
            for ctl in self_reports:
                self._node_report(ctl, ctl, epoch)
        if self._ticks_enabled:
            self.loop.schedule(self.loop.now_us + period_us, CONTROL_CYCLE_TICK)

    def _evaluate_fork_window(self) -> None:
        cfg = self.cfg
        now = self.loop.now_us
        window_us = ms_to_us(cfg.fork_window_s * 1000.0)
        if now <= 0 or window_us <= 0:
            return
        start = now - window_us
        in_window = [b for b in self.blocks if start <= b.born_us < now]
        if not in_window:
            return
        heights: dict[int, int] = {}
        forks = 0
        for b in in_window:
            if b.height in heights and heights[b.height] != b.id:
                forks += 1
            else:
                heights[b.height] = b.id
        window = control_mod.ForkRateWindow(start / US_PER_MS, cfg.fork_window_s * 1000.0,
                                            forks, len(in_window))
        self.fork_rates.append((now / US_PER_MS, window.rate))
        if control_mod.fork_feedback(window, self._prev_fork_rate,
                                     cfg.fork_high_threshold, cfg.fork_relative_increase):
            self._pending_reconfig = True
            self._reconfig_cause = f"fork-rate={window.rate:.3f}"
        self._prev_fork_rate = window.rate

    def _on_control_message(self, msg: Message) -> None:
        tag = msg.data[0]
        if tag == "poll":
            _, epoch, ctl = msg.data
            self._node_report(msg.dst, ctl, epoch)
        elif tag == "report":
            self._on_report(msg)
        elif tag == "summary":
            self._on_summary(msg)
        elif tag == "rec":
            self._on_recommendation(msg)

    def _node_report(self, node: int, ctl: int, epoch: int) -> None:
        nd = self.topo.nodes[node]
        record = ge.NodeReport(epoch, ge.NodeRecord(
            node, nd.zone, nd.uplink_bw, nd.compute, self.online[node],
            self.topo.degree(node)))
        links = []
        for other, link in self.topo.adjacency()[node]:
            links.append(ge.LinkReportMsg(epoch, self._measure_link(link, node)))
        payload = ("report", epoch, record, links)
        if node == ctl:
            self._accept_report(ctl, epoch, record, links)
        else:
            self._send(node, ctl, MSG_CONTROL, self._control_size(), data=payload)

    def _on_report(self, msg: Message) -> None:
        _, epoch, record, links = msg.data
        self._accept_report(msg.dst, epoch, record, links)

    def _accept_report(self, ctl: int, epoch: int, record, links) -> None:
        state = self._cycle_state.get(epoch)
        if state is None or state["done"] or not self.ctl_active.get(ctl):
            return
        state["node_reports"].append(record)
        state["link_reports"].extend(links)
        state["got"][ctl] = state["got"].get(ctl, 0) + 1
        if state["got"][ctl] >= state["expected"].get(ctl, 0):
            self._controller_collected(ctl, epoch)

    def _controller_collected(self, ctl: int, epoch: int) -> None:
        state = self._cycle_state.get(epoch)
        if state is None or state.get(("collected", ctl)):
            return
        state[("collected", ctl)] = True
        active = [c for c in self.controllers if self.ctl_active.get(c)]
        peers = [c for c in active if c != ctl]
        state["summaries"].setdefault(ctl, set()).add(ctl)
        for peer in peers:
            self._send(ctl, peer, MSG_CONTROL, self._control_size(),
                       data=("summary", epoch, ctl))
        self._maybe_finalize(ctl, epoch)

    def _on_summary(self, msg: Message) -> None:
        _, epoch, from_ctl = msg.data
        state = self._cycle_state.get(epoch)
        if state is None:
            return
        state["summaries"].setdefault(msg.dst, set()).add(from_ctl)
        self._maybe_finalize(msg.dst, epoch)

    def _maybe_finalize(self, ctl: int, epoch: int) -> None:
        state = self._cycle_state.get(epoch)
        if state is None or state["done"] or not self.ctl_active.get(ctl):
            return
        if not state.get(("collected", ctl)):
            return
        active = {c for c in self.controllers if self.ctl_active.get(c)}
        have = state["summaries"].get(ctl, set())
        if not active.issubset(have):
            return
        state["done"] = True
        self._finalize_cycle(ctl, epoch, state)

    def _finalize_cycle(self, ctl: int, epoch: int, state: dict) -> None:
        cfg = self.cfg
        try:
            view = ge.build_view(state["node_reports"], state["link_reports"], epoch, epoch)
        except ge.ViewError:
            self.control_log.append(CycleLogEntry(epoch, 0,
                                                  self.cmap.cluster_count if self.cmap else 0,
                                                  False, "empty-view"))
            return
        self.view = view
        self.stale_view_mode = False
        reconfigured = False
        cause = "steady"
        membership_changed = (
            self.cmap is None or
            set(view.online_ids()) != set(self.cmap.cluster_of))
        if self._pending_reconfig or membership_changed:
            reconfigured = True
            cause = self._reconfig_cause if self._pending_reconfig else "membership-change"
            self._reconfigure(view, epoch)
            self._pending_reconfig = False
            self._reconfig_cause = "steady"
            self.reconfig_epochs.append(epoch)
        self.control_log.append(CycleLogEntry(
            epoch, len(view.nodes), self.cmap.cluster_count if self.cmap else 0,
            reconfigured, cause))
        self._cycle_state.pop(epoch, None)

    def _reconfigure(self, view: ge.GlobalView, epoch: int) -> None:
        cfg = self.cfg
        cmap = ge.partition(view, cfg.target_cluster_size,
                            cap_factor=cfg.cluster_cap_factor,
                            w_bw=cfg.capacity_weight_bw,
                            w_compute=cfg.capacity_weight_compute)
        self.cmap = cmap
        self.scores = ge.capacity_scores(view, cfg.capacity_weight_bw,
                                         cfg.capacity_weight_compute)
        recs = control_mod.recommend_all(
            view, cmap, k=cfg.overlay_degree,
            inbound_cap_ratio=cfg.inbound_cap_ratio,
            backbone_k=cfg.backbone_degree)
        plan = proto.build_push_plan(cmap, self.scores, cfg.max_push_children)
        for node, rec in recs.items():
            rec.push_children = plan.get(node, [])
        self.node_recs = recs
        self.push_children = plan
        self.backbone_recs = {h: recs[h] for h, _ in cmap.heads.values() if h in recs}
        self._relay_cache = {}
        # controllers own their domains and dispatch recommendations as messages
        self.domains = control_mod.assign_domains(
            sorted(cmap.members), [c for c in self.controllers if self.ctl_active.get(c)],
            cmap)
        for ctl, dom in self.domains.items():
            for node in dom.nodes:
                rec = recs.get(node)
                if rec is None:
                    continue
                if node == ctl:
                    self._apply_recommendation(node, rec)
                else:
                    self._send(ctl, node, MSG_CONTROL, self._control_size(),
                               data=("rec", epoch, rec))

    def _on_recommendation(self, msg: Message) -> None:
        _, epoch, rec = msg.data
        self._apply_recommendation(msg.dst, rec)

    def _apply_recommendation(self, node: int, rec) -> None:
        current = self.node_sets.get(node)
        if current is not None and rec.epoch < current.epoch:
            return  # stale epoch; ignore to avoid oscillation
        head = self.cmap.head_of(node) if (self.cmap and node in self.cmap.cluster_of) else None
        self.node_sets[node] = proto.NeighborSet.from_recommendation(rec, head)

    def _on_micro_tick(self, event) -> None:
        if self.protocol == proto.BLOCKSDN:
            for node in sorted(self.node_sets):
                ns = self.node_sets[node]
                rec = self.node_recs.get(node)
                if rec is not None:
                    proto.micro_refine(ns, rec, self.cfg.micro_degradation_factor)
        if self._ticks_enabled:
            self.loop.schedule(
                self.loop.now_us + ms_to_us(self.cfg.micro_interval_s * 1000.0), MICRO_TICK)

    # --- churn / failures ---------------------------------------------------------

    def schedule_churn(self, node: int, at_ms: float, online: bool) -> None:
        self.loop.schedule(ms_to_us(at_ms), NODE_CHURN, target=node, data=online)

    def _on_churn(self, event) -> None:
        self.online[event.target] = bool(event.data)
        self.topo.nodes[event.target].online = bool(event.data)

    def schedule_controller_failure(self, ctl: int, at_ms: float) -> None:
        self.loop.schedule(ms_to_us(at_ms), CONTROLLER_FAILURE, target=ctl)

    def _on_controller_failure(self, event) -> None:
        ctl = event.target
        if ctl not in self.ctl_active or not self.ctl_active[ctl]:
            return
        self.ctl_active[ctl] = False
        self.domains = control_mod.reassign_after_failure(self.domains, ctl, self.cmap)
        if not any(self.ctl_active.values()):
            self.stale_view_mode = True

    # --- run modes -------------------------------------------------------------------

    def stop_ticks(self) -> None:
        self._ticks_enabled = False

    def run_broadcasts(self, blocks: Optional[int] = None,
                       spacing_s: Optional[float] = None) -> RunResult:
        """Sequential block broadcasts on a fixed grid after warmup."""
        cfg = self.cfg
        blocks = blocks if blocks is not None else cfg.blocks_per_run
        spacing = spacing_s if spacing_s is not None else cfg.block_spacing_s
        rng = self.streams.stream("production")
        producers = sorted(u for u in self.topo.nodes if self.online[u])
        weights = [self.topo.nodes[u].compute for u in producers]
        last = 0
        for i in range(blocks):
            at = ms_to_us((cfg.warmup_s + i * spacing) * 1000.0)
            producer = rng.choices(producers, weights=weights, k=1)[0]
            self.produce_block(producer, at_us=at)
            last = at
        self.loop.run(until_ms=last / US_PER_MS + 1)
        self.stop_ticks()
        summary = self.loop.run()
        return self._result(summary)

    def run_throughput(self, scale_rate_per_s: Optional[float] = None) -> RunResult:
        """Poisson production inside a fixed window; stragglers past the
        cutoff earn no throughput credit."""
        cfg = self.cfg
        n_online = sum(1 for v in self.online.values() if v)
        rate = (scale_rate_per_s if scale_rate_per_s is not None
                else cfg.throughput_rate_per_node * n_online)
        rng = self.streams.stream("production")
        producers = sorted(u for u in self.topo.nodes if self.online[u])
        weights = [self.topo.nodes[u].compute for u in producers]
        start_us = ms_to_us(cfg.warmup_s * 1000.0)
        window_us = ms_to_us(cfg.throughput_window_s * 1000.0)
        schedule = chain_mod.produce_schedule(window_us, rate, producers, weights, rng)
        for t, producer in schedule:
            self.produce_block(producer, at_us=start_us + t)
        summary = self.loop.run(until_ms=(start_us + window_us) / US_PER_MS)
        self.stop_ticks()
        return self._result(summary)

    def run_quiescence(self, until_ms: Optional[float] = None) -> RunResult:
        summary = self.loop.run(until_ms=until_ms)
        self.stop_ticks()
        if until_ms is not None:
            summary = self.loop.run()
        return self._result(summary)

    def _result(self, summary: RunSummary) -> RunResult:
        starve = sum(ns.starvation for ns in self.node_sets.values())
        return RunResult(
            protocol=self.protocol,
            seed=self.seed,
            trace=self.trace,
            blocks=self.blocks,
            n_online_at_birth=self.n_online_at_birth,
            chain=self.chain,
            control_log=self.control_log,
            reconfig_epochs=self.reconfig_epochs,
            fork_rates=self.fork_rates,
            ctl_messages=self.ctl_messages,
            ctl_bytes_mb=self.ctl_bytes_mb,
            summary=summary,
            starvation=starve,
        )
