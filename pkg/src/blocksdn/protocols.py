"""Broadcast strategy structures: the random gossip overlay, the
zone-tree baseline ("mercury"), and the hierarchical cluster broadcast,
plus micro-level neighbor refinement and redundancy accounting.

The mercury baseline is a documented approximation of a structured
broadcast: geographic (zone) clusters, a latency spanning tree per
cluster, and one fixed gateway relaying between each cluster pair. The
cited system's internal algorithm is not public, so this reconstruction
only aims for its qualitative signature: strong on rings and trees,
gateway-bound on stars.
"""
from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from typing import Optional

from .control import NeighborRecommendation
from .graphengine import ClusterMap, GlobalView

GOSSIP = "gossip"
MERCURY = "mercury"
BLOCKSDN = "blocksdn"
PROTOCOLS = (GOSSIP, MERCURY, BLOCKSDN)

SRC_MACRO = "macro-recommended"
SRC_MICRO = "micro-replaced"
SRC_RANDOM = "random"


# --- gossip overlay -------------------------------------------------------------

def build_gossip_overlay(node_ids: list[int], k: int, rng: random.Random) -> dict[int, list[int]]:
    """Random near-regular undirected overlay of degree ~k, patched connected."""
    ids = sorted(node_ids)
    n = len(ids)
    if n < 2:
        return {u: [] for u in ids}
    k = min(k, n - 1)
    neighbors: dict[int, set[int]] = {u: set() for u in ids}
    pool = ids[:]
    for _ in range(k * 3):
        rng.shuffle(pool)
        for a, b in zip(pool[::2], pool[1::2]):
            if a != b and b not in neighbors[a] and len(neighbors[a]) < k and len(neighbors[b]) < k:
                neighbors[a].add(b)
                neighbors[b].add(a)
        if all(len(s) >= k for s in neighbors.values()):
            break
    # top up any underfilled nodes
    for u in ids:
        tries = 0
        while len(neighbors[u]) < k and tries < 50:
            tries += 1
            v = rng.choice(ids)
            if v != u and v not in neighbors[u]:
                neighbors[u].add(v)
                neighbors[v].add(u)
    # connectivity patch: bridge components in id order
    comp_of: dict[int, int] = {}
    for root in ids:
        if root in comp_of:
            continue
        stack = [root]
        comp_of[root] = root
        while stack:
            x = stack.pop()
            for y in neighbors[x]:
                if y not in comp_of:
                    comp_of[y] = root
                    stack.append(y)
    roots = sorted(set(comp_of.values()))
    for a, b in zip(roots, roots[1:]):
        neighbors[a].add(b)
        neighbors[b].add(a)
    return {u: sorted(neighbors[u]) for u in ids}


# --- mercury baseline -------------------------------------------------------------

@dataclass
class MercuryPlan:
    cluster_of: dict[int, int]
    members: dict[int, list[int]]
    gateways: dict[int, int]
    tree_adj: dict[int, list[int]]  # undirected spanning-tree adjacency

    def gateway_of(self, node: int) -> int:
        return self.gateways[self.cluster_of[node]]


def _closeness_center(members: list[int], adj: dict[int, list[tuple[int, int]]]) -> int:
    """Structural gateway pick: the member with the lowest total hop distance
    over measured intra-cluster edges (ties to the lowest id). Deliberately
    blind to bandwidth and compute."""
    member_set = set(members)
    best_key = None
    best = members[0]
    for src in sorted(members):
        dist = {src: 0}
        frontier = [src]
        total = 0
        while frontier:
            nxt = []
            for u in frontier:
                for v, _ in adj.get(u, ()):
                    if v in member_set and v not in dist:
                        dist[v] = dist[u] + 1
                        total += dist[v]
                        nxt.append(v)
            frontier = nxt
        key = (len(members) - len(dist), total, src)
        if best_key is None or key < best_key:
            best_key = key
            best = src
    return best


def build_mercury_plan(view: GlobalView) -> MercuryPlan:
    """Zone clusters, closeness-central gateways, latency SPT per cluster."""
    ids = view.online_ids()
    members: dict[int, list[int]] = {}
    for u in ids:
        members.setdefault(view.nodes[u].zone, []).append(u)
    members = {cid: sorted(mem) for cid, mem in sorted(members.items())}
    cluster_of = {u: cid for cid, mem in members.items() for u in mem}

    adj: dict[int, list[tuple[int, int]]] = {u: [] for u in ids}
    for (a, b), lat in view.edges.items():
        if a in cluster_of and b in cluster_of and cluster_of[a] == cluster_of[b]:
            adj[a].append((b, lat))
            adj[b].append((a, lat))

    gateways: dict[int, int] = {}
    tree_adj: dict[int, list[int]] = {u: [] for u in ids}
    for cid, mem in members.items():
        gw = _closeness_center(mem, adj)
        gateways[cid] = gw
        # shortest-path tree from the gateway over measured intra edges
        dist: dict[int, int] = {gw: 0}
        parent: dict[int, Optional[int]] = {gw: None}
        heap = [(0, gw)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist.get(u, float("inf")):
                continue
            for v, lat in adj[u]:
                nd = d + lat
                if nd < dist.get(v, float("inf")):
                    dist[v] = nd
                    parent[v] = u
                    heapq.heappush(heap, (nd, v))
        for u in mem:
            if u == gw:
                continue
            par = parent.get(u)
            if par is None:
                par = gw  # unreachable by measurement: direct gateway child
            tree_adj[u].append(par)
            tree_adj[par].append(u)
    tree_adj = {u: sorted(vs) for u, vs in tree_adj.items()}
    return MercuryPlan(cluster_of, members, gateways, tree_adj)


# --- hierarchical cluster broadcast ------------------------------------------------

def cap_children(children: dict[int, list[int]], root: int, max_children: int,
                 order_key) -> dict[int, list[int]]:
    """Rebalance a push tree so no pusher exceeds max_children.

    Overflow children are handed to the pusher's earlier children
    (least-loaded first), cascading the push instead of serializing one
    hot uplink. Shapes change; coverage and exactly-once do not.
    """
    children = {u: list(vs) for u, vs in children.items()}
    queue = [u for u, vs in children.items() if len(vs) > max_children]
    guard = 0
    while queue and guard < 10000:
        guard += 1
        u = queue.pop(0)
        kids = sorted(children.get(u, []), key=order_key)
        if len(kids) <= max_children:
            continue
        keep, excess = kids[:max_children], kids[max_children:]
        children[u] = keep
        for child in excess:
            host = min(keep, key=lambda c: (len(children.get(c, [])), order_key(c)))
            children.setdefault(host, []).append(child)
            if len(children[host]) > max_children and host not in queue:
                queue.append(host)
    return children


def build_push_plan(cmap: ClusterMap, scores: dict[int, float],
                    max_children: int = 8) -> dict[int, list[int]]:
    """Intra-cluster push children for every node, from the layer parents,
    with hot pushers offloaded onto their own children."""
    children: dict[int, list[int]] = {u: [] for u in cmap.cluster_of}
    for node, par in cmap.parent_of.items():
        if par is not None:
            children[par].append(node)
    order_key = lambda u: (-scores.get(u, 0.0), u)
    out: dict[int, list[int]] = {}
    for cid, mem in cmap.members.items():
        head = cmap.heads[cid][0]
        local = {u: children[u] for u in mem}
        local = cap_children(local, head, max_children, order_key)
        out.update(local)
    return out


def build_relay_tree(backbone: dict[int, NeighborRecommendation], origin_head: int,
                     max_children: int = 8) -> dict[int, list[int]]:
    """Relay children among heads for one broadcast, rooted at the origin's
    head: BFS over the backbone peer graph, unreachable heads attached to
    the root, then fanout capped."""
    heads = sorted(backbone)
    adj: dict[int, set[int]] = {h: set() for h in heads}
    for h, rec in backbone.items():
        for peer in rec.peer_ids():
            if peer in adj:
                adj[h].add(peer)
                adj[peer].add(h)
    parent: dict[int, Optional[int]] = {origin_head: None}
    frontier = [origin_head]
    while frontier:
        nxt = []
        for u in sorted(frontier):
            for v in sorted(adj[u]):
                if v not in parent:
                    parent[v] = u
                    nxt.append(v)
        frontier = nxt
    for h in heads:
        if h not in parent:
            parent[h] = origin_head
    children: dict[int, list[int]] = {h: [] for h in heads}
    for node, par in parent.items():
        if par is not None:
            children[par].append(node)
    return cap_children(children, origin_head, max_children, lambda u: u)


# --- micro refinement ---------------------------------------------------------------

@dataclass
class NeighborSet:
    node: int
    peers: list[int]
    expected_ms: dict[int, float]
    source: dict[int, str]
    ewma_ms: dict[int, float] = field(default_factory=dict)
    head: Optional[int] = None
    epoch: int = 0
    starvation: int = 0

    @classmethod
    def from_recommendation(cls, rec: NeighborRecommendation, head: Optional[int]) -> "NeighborSet":
        return cls(
            node=rec.node,
            peers=rec.peer_ids(),
            expected_ms={p: lat for p, lat in rec.peers},
            source={p: SRC_MACRO for p, _ in rec.peers},
            head=head,
            epoch=rec.epoch,
        )

    def observe(self, peer: int, sample_ms: float, alpha: float = 0.3) -> None:
        prev = self.ewma_ms.get(peer)
        self.ewma_ms[peer] = sample_ms if prev is None else alpha * sample_ms + (1 - alpha) * prev


def micro_refine(ns: NeighborSet, rec: NeighborRecommendation,
                 degradation_factor: float = 2.0) -> list[tuple[int, int]]:
    """One refinement tick: swap out peers whose observed EWMA exceeds the
    recommended expectation by more than the factor, pulling replacements
    from the recommendation's ordered backup tail. The cluster head is
    never evicted. Returns (evicted, replacement) pairs."""
    if rec.epoch < ns.epoch:
        return []
    in_use = set(ns.peers)
    spares = [p for p, _ in rec.backups if p not in in_use]
    spare_lat = dict(rec.backups)
    swaps: list[tuple[int, int]] = []
    for peer in list(ns.peers):
        if peer == ns.head:
            continue
        expected = ns.expected_ms.get(peer)
        observed = ns.ewma_ms.get(peer)
        if expected is None or observed is None or expected <= 0:
            continue
        if observed <= expected * degradation_factor:
            continue
        if not spares:
            ns.starvation += 1
            continue
        replacement = spares.pop(0)
        ns.peers[ns.peers.index(peer)] = replacement
        ns.expected_ms.pop(peer, None)
        ns.source.pop(peer, None)
        ns.expected_ms[replacement] = spare_lat[replacement]
        ns.source[replacement] = SRC_MICRO
        swaps.append((peer, replacement))
    return swaps


# --- propagation traces ---------------------------------------------------------------

@dataclass(slots=True)
class Delivery:
    block: int
    node: int
    arrival_us: int
    hops: int
    duplicate: bool


@dataclass
class PropagationTrace:
    deliveries: list[Delivery] = field(default_factory=list)
    first_arrival: dict[int, dict[int, int]] = field(default_factory=dict)  # block -> node -> us
    dup_blocks: int = 0
    dup_announces: int = 0
    announces: int = 0
    requests: int = 0
    block_sends: int = 0
    unreached: int = 0

    @property
    def total_messages(self) -> int:
        return self.announces + self.requests + self.block_sends

    def record_block(self, block: int, node: int, at_us: int, hops: int) -> bool:
        """Record a block-size arrival; returns True when it is a first."""
        per = self.first_arrival.setdefault(block, {})
        if node in per:
            self.dup_blocks += 1
            self.deliveries.append(Delivery(block, node, at_us, hops, True))
            return False
        per[node] = at_us
        self.deliveries.append(Delivery(block, node, at_us, hops, False))
        return True

    def reach(self, block: int) -> int:
        return len(self.first_arrival.get(block, {}))


@dataclass(slots=True)
class RedundancyStats:
    duplicates: int
    total_messages: int

    @property
    def redundancy_ratio(self) -> float:
        return self.duplicates / self.total_messages if self.total_messages else 0.0


def redundancy(trace: PropagationTrace) -> RedundancyStats:
    """Messages that reached nodes already holding (or already fetching)
    the block, over all messages sent."""
    return RedundancyStats(
        duplicates=trace.dup_blocks + trace.dup_announces,
        total_messages=trace.total_messages,
    )


def export_trace_lines(trace: PropagationTrace) -> list[str]:
    """One line per delivery: block, node, arrival ms, hops, duplicate flag."""
    return [
        f"{d.block} {d.node} {d.arrival_us / 1000.0:.3f} {d.hops} {1 if d.duplicate else 0}"
        for d in trace.deliveries
    ]


def parse_trace_lines(lines) -> PropagationTrace:
    trace = PropagationTrace()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"line {lineno}: expected 5 fields, got {len(parts)}")
        try:
            block, node = int(parts[0]), int(parts[1])
            at_us = round(float(parts[2]) * 1000.0)
            hops, dup = int(parts[3]), bool(int(parts[4]))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
        if dup:
            trace.dup_blocks += 1
            trace.deliveries.append(Delivery(block, node, at_us, hops, True))
        else:
            trace.first_arrival.setdefault(block, {})[node] = at_us
            trace.deliveries.append(Delivery(block, node, at_us, hops, False))
    return trace
