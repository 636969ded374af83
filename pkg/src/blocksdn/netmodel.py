"""Physical underlay: heterogeneous nodes and links, topology generators,
and the transmission-delay model.

Latencies are integer microseconds throughout so path sums stay exact.
Overlay messages traverse the underlay shortest path as one end-to-end
delay; the only queueing modeled is serialization on the sender uplink,
which is what lets hub and relay bottlenecks emerge on their own.
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, dijkstra

from .engine import US_PER_MS

INF = math.inf

ZONED_RANDOM = "zoned-random"
RING = "ring"
STAR = "star"
TREE = "tree"
KINDS = (ZONED_RANDOM, RING, STAR, TREE)


class TopologyError(ValueError):
    """Infeasible or inconsistent topology parameters."""


@dataclass(slots=True)
class PhysNode:
    id: int
    zone: int
    uplink_bw: float  # Mbps
    compute: float    # relative validation speed, 1.0 = baseline
    online: bool = True


@dataclass(slots=True)
class PhysLink:
    a: int
    b: int
    latency_us: int
    bw: float  # Mbps
    up: bool = True

    @property
    def latency_ms(self) -> float:
        return self.latency_us / US_PER_MS


@dataclass(slots=True)
class LinkMetrics:
    """One measurement of a link, as reported to a collector."""
    a: int
    b: int
    latency_us: Optional[int]  # None when the link is unavailable
    reporter: int
    up: bool


@dataclass
class PhysTopology:
    kind: str
    nodes: dict[int, PhysNode]
    links: list[PhysLink]
    _adj: Optional[dict[int, list[tuple[int, PhysLink]]]] = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.nodes)

    def adjacency(self) -> dict[int, list[tuple[int, PhysLink]]]:
        if self._adj is None:
            adj: dict[int, list[tuple[int, PhysLink]]] = {i: [] for i in self.nodes}
            for link in self.links:
                adj[link.a].append((link.b, link))
                adj[link.b].append((link.a, link))
            self._adj = adj
        return self._adj

    def invalidate_caches(self) -> None:
        self._adj = None

    def link_between(self, a: int, b: int) -> Optional[PhysLink]:
        for other, link in self.adjacency()[a]:
            if other == b:
                return link
        return None

    def degree(self, node: int) -> int:
        return len(self.adjacency()[node])

    def is_connected(self) -> bool:
        if not self.nodes:
            return False
        seen = {next(iter(self.nodes))}
        stack = list(seen)
        adj = self.adjacency()
        while stack:
            u = stack.pop()
            for v, link in adj[u]:
                if link.up and v not in seen:
                    seen.add(v)
                    stack.append(v)
        return len(seen) == len(self.nodes)


# --- message sizes -----------------------------------------------------------

MSG_BLOCK = "block"
MSG_INV = "inv-announce"
MSG_REQUEST = "block-request"
MSG_CONTROL = "control"


@dataclass(slots=True)
class Message:
    kind: str
    size_mb: float
    src: int
    dst: int
    block: object = None
    hops: int = 0
    sent_at_us: int = 0
    data: object = None


def serialization_us(size_mb: float, bw_mbps: float) -> int:
    """Time to push size_mb through a bw_mbps pipe."""
    return round(size_mb * 8_000_000.0 / bw_mbps)


def transmission_delay_ms(link: PhysLink, size_mb: float, sender: PhysNode) -> float:
    """One-way delay of a message over a single link.

    latency + size*8 / min(link bw, sender uplink bw); strictly increasing
    in size. 1 MB over a 10ms/100Mbps link from a fast sender -> 90 ms.
    """
    if not link.up:
        raise TopologyError(f"link {link.a}-{link.b} is down")
    if size_mb <= 0:
        raise ValueError("message size must be positive")
    bw = min(link.bw, sender.uplink_bw)
    return link.latency_ms + serialization_us(size_mb, bw) / US_PER_MS


# --- generators --------------------------------------------------------------

def _draw(rng: random.Random, choices, weights) -> float:
    return rng.choices(list(choices), weights=list(weights), k=1)[0]


def _lat_us(rng: random.Random, lo_ms: float, hi_ms: float) -> int:
    return rng.randint(round(lo_ms * US_PER_MS), round(hi_ms * US_PER_MS))


@dataclass
class TopologySpec:
    """Parameters for generate_topology. Latency bounds are milliseconds."""
    kind: str = ZONED_RANDOM
    n: int = 1000
    zones: int = 10
    intra_latency: tuple[float, float] = (5.0, 30.0)
    inter_latency: tuple[float, float] = (50.0, 150.0)
    bw_choices: tuple[float, ...] = (50.0, 100.0, 500.0, 1000.0)
    bw_weights: tuple[float, ...] = (0.3, 0.4, 0.2, 0.1)
    compute_choices: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    compute_weights: tuple[float, ...] = (0.2, 0.5, 0.2, 0.1)
    intra_degree: float = 4.0
    inter_links_per_zone_pair: int = 2
    link_bw_intra: float = 1000.0
    link_bw_inter: float = 10000.0
    # ring
    local_rings: int = 10
    ring_local_latency: tuple[float, float] = (2.0, 8.0)
    ring_backbone_latency: tuple[float, float] = (150.0, 350.0)
    # star
    star_hub_bw: float = 10000.0
    star_latency: tuple[float, float] = (5.0, 20.0)
    # tree
    tree_depth: int = 5
    tree_latency: tuple[float, float] = (5.0, 25.0)
    latency_scale: float = 1.0


def _make_nodes(spec: TopologySpec, rng: random.Random, zone_of) -> dict[int, PhysNode]:
    nodes = {}
    for i in range(spec.n):
        nodes[i] = PhysNode(
            id=i,
            zone=zone_of(i),
            uplink_bw=_draw(rng, spec.bw_choices, spec.bw_weights),
            compute=_draw(rng, spec.compute_choices, spec.compute_weights),
        )
    return nodes


def _scaled(spec: TopologySpec, us: int) -> int:
    return max(1, round(us * spec.latency_scale))


def _gen_zoned_random(spec: TopologySpec, rng: random.Random) -> PhysTopology:
    z = max(1, spec.zones)
    zone_of = lambda i: i * z // spec.n
    nodes = _make_nodes(spec, rng, zone_of)
    members: dict[int, list[int]] = {}
    for i in range(spec.n):
        members.setdefault(zone_of(i), []).append(i)

    links: list[PhysLink] = []
    seen_pairs: set[tuple[int, int]] = set()

    def add(a: int, b: int, lo: float, hi: float, bw: float) -> bool:
        key = (min(a, b), max(a, b))
        if a == b or key in seen_pairs:
            return False
        seen_pairs.add(key)
        links.append(PhysLink(a, b, _scaled(spec, _lat_us(rng, lo, hi)), bw))
        return True

    lo_i, hi_i = spec.intra_latency
    for zone_nodes in members.values():
        order = zone_nodes[:]
        rng.shuffle(order)
        made = 0
        for a, b in zip(order, order[1:]):  # spanning path keeps the zone connected
            made += add(a, b, lo_i, hi_i, spec.link_bw_intra)
        target_edges = round(len(zone_nodes) * spec.intra_degree / 2)
        guard = 0
        while len(zone_nodes) > 2 and made < target_edges and guard < target_edges * 20:
            guard += 1
            a, b = rng.sample(zone_nodes, 2)
            made += add(a, b, lo_i, hi_i, spec.link_bw_intra)

    lo_x, hi_x = spec.inter_latency
    zone_ids = sorted(members)
    for idx, zi in enumerate(zone_ids):
        for zj in zone_ids[idx + 1:]:
            made = 0
            guard = 0
            while made < spec.inter_links_per_zone_pair and guard < 50:
                guard += 1
                a = rng.choice(members[zi])
                b = rng.choice(members[zj])
                if add(a, b, lo_x, hi_x, spec.link_bw_inter):
                    made += 1
    return PhysTopology(ZONED_RANDOM, nodes, links)


def _gen_ring(spec: TopologySpec, rng: random.Random) -> PhysTopology:
    k = spec.local_rings
    if k < 1 or spec.n < 2 * k:
        raise TopologyError(f"ring needs at least 2 nodes per local ring (n={spec.n}, rings={k})")
    ring_sizes = [spec.n // k + (1 if i < spec.n % k else 0) for i in range(k)]
    # zone = local ring index
    rings: list[list[int]] = []
    nid = 0
    for size in ring_sizes:
        rings.append(list(range(nid, nid + size)))
        nid += size
    zone_map = {}
    for zi, ring_nodes in enumerate(rings):
        for u in ring_nodes:
            zone_map[u] = zi
    nodes = _make_nodes(spec, rng, lambda i: zone_map[i])

    links: list[PhysLink] = []
    lo, hi = spec.ring_local_latency
    for ring_nodes in rings:
        m = len(ring_nodes)
        for i in range(m if m > 2 else 1):
            a, b = ring_nodes[i], ring_nodes[(i + 1) % m]
            links.append(PhysLink(a, b, _scaled(spec, _lat_us(rng, lo, hi)), spec.link_bw_intra))
    gateways = [ring_nodes[0] for ring_nodes in rings]
    lo_b, hi_b = spec.ring_backbone_latency
    if k > 1:
        for i in range(k if k > 2 else 1):
            a, b = gateways[i], gateways[(i + 1) % k]
            links.append(PhysLink(a, b, _scaled(spec, _lat_us(rng, lo_b, hi_b)), spec.link_bw_inter))
    return PhysTopology(RING, nodes, links)


def _gen_star(spec: TopologySpec, rng: random.Random) -> PhysTopology:
    z = max(1, spec.zones)
    zone_of = lambda i: 0 if i == 0 else 1 + (i - 1) % z if z > 1 else 0
    nodes = _make_nodes(spec, rng, zone_of)
    hub = nodes[0]
    hub.uplink_bw = spec.star_hub_bw
    hub.compute = max(spec.compute_choices)
    lo, hi = spec.star_latency
    links = [
        PhysLink(0, i, _scaled(spec, _lat_us(rng, lo, hi)), spec.link_bw_intra)
        for i in range(1, spec.n)
    ]
    return PhysTopology(STAR, nodes, links)


def _gen_tree(spec: TopologySpec, rng: random.Random) -> PhysTopology:
    depth = spec.tree_depth
    if depth < 1 or spec.n < depth + 1:
        raise TopologyError(f"tree depth {depth} infeasible for n={spec.n}")
    # smallest branching factor whose capacity over `depth` levels covers n
    b = 2
    while sum(b ** d for d in range(depth + 1)) < spec.n:
        b += 1
    if spec.n == depth + 1:
        b = 1
    parent: dict[int, int] = {}
    level_of = {0: 0}
    # a spine first so the max depth is exactly `depth`
    for i in range(1, depth + 1):
        parent[i] = i - 1
        level_of[i] = i
    children_count = {i: (1 if i < depth else 0) for i in range(depth + 1)}
    frontier = [i for i in range(depth + 1) if level_of[i] < depth]
    nxt = depth + 1
    while nxt < spec.n:
        frontier.sort(key=lambda u: (level_of[u], u))
        placed = False
        for u in frontier:
            if children_count[u] < b:
                parent[nxt] = u
                level_of[nxt] = level_of[u] + 1
                children_count[u] += 1
                children_count[nxt] = 0
                if level_of[nxt] < depth:
                    frontier.append(nxt)
                if children_count[u] >= b:
                    frontier.remove(u)
                placed = True
                break
        if not placed:
            raise TopologyError(f"tree depth {depth} with branching {b} cannot hold n={spec.n}")
        nxt += 1
    # zone = index of the depth-1 ancestor (root in zone 0)
    def top_ancestor(u: int) -> int:
        while level_of[u] > 1:
            u = parent[u]
        return u
    tops = sorted({top_ancestor(u) for u in range(1, spec.n)})
    top_zone = {t: i + 1 for i, t in enumerate(tops)}
    zone_of = lambda i: 0 if i == 0 else top_zone[top_ancestor(i)]
    nodes = _make_nodes(spec, rng, zone_of)
    lo, hi = spec.tree_latency
    links = [
        PhysLink(parent[i], i, _scaled(spec, _lat_us(rng, lo, hi)), spec.link_bw_intra)
        for i in range(1, spec.n)
    ]
    return PhysTopology(TREE, nodes, links)


_GENERATORS = {
    ZONED_RANDOM: _gen_zoned_random,
    RING: _gen_ring,
    STAR: _gen_star,
    TREE: _gen_tree,
}


def generate_topology(spec: TopologySpec, rng: random.Random) -> PhysTopology:
    if spec.kind not in _GENERATORS:
        raise TopologyError(f"unknown topology kind {spec.kind!r}")
    if spec.n < 2:
        raise TopologyError("need at least 2 nodes")
    topo = _GENERATORS[spec.kind](spec, rng)
    if not topo.is_connected():
        # patch rare disconnections deterministically: chain components together
        comp = _components(topo)
        reps = [min(c) for c in comp]
        lo, hi = spec.inter_latency
        for a, b in zip(reps, reps[1:]):
            topo.links.append(PhysLink(a, b, _scaled(spec, _lat_us(rng, lo, hi)), spec.link_bw_inter))
        topo.invalidate_caches()
    return topo


def _components(topo: PhysTopology) -> list[list[int]]:
    seen: set[int] = set()
    comps = []
    adj = topo.adjacency()
    for start in sorted(topo.nodes):
        if start in seen:
            continue
        comp = [start]
        seen.add(start)
        stack = [start]
        while stack:
            u = stack.pop()
            for v, link in adj[u]:
                if link.up and v not in seen:
                    seen.add(v)
                    comp.append(v)
                    stack.append(v)
        comps.append(sorted(comp))
    return comps


# --- topology kind invariants -------------------------------------------------

def check_topology(topo: PhysTopology, kind: Optional[str] = None,
                   expected_depth: Optional[int] = None,
                   expected_rings: Optional[int] = None) -> list[str]:
    """Return a list of invariant violations (empty = ok)."""
    problems = []
    if not topo.is_connected():
        problems.append("topology is not connected")
    kind = kind or topo.kind
    n = topo.n
    if kind == STAR:
        hub_candidates = [u for u in topo.nodes if topo.degree(u) == n - 1]
        if len(topo.links) != n - 1:
            problems.append(f"star must have n-1 links, found {len(topo.links)}")
        if not hub_candidates:
            problems.append("star has no hub adjacent to all other nodes")
    elif kind == TREE:
        if len(topo.links) != n - 1:
            problems.append(f"tree must have n-1 links, found {len(topo.links)}")
        if expected_depth is not None:
            depth = _bfs_depth(topo, 0)
            if depth != expected_depth:
                problems.append(f"tree depth {depth} != configured {expected_depth}")
    elif kind == RING:
        deg2 = sum(1 for u in topo.nodes if topo.degree(u) == 2)
        if deg2 < n // 2:
            problems.append("ring-of-rings structure missing (too few degree-2 nodes)")
        if expected_rings is not None:
            deg4 = [u for u in topo.nodes if topo.degree(u) == 4]
            if len(deg4) != expected_rings and expected_rings > 2:
                problems.append(
                    f"expected {expected_rings} backbone gateways, found {len(deg4)}")
    return problems


def _bfs_depth(topo: PhysTopology, root: int) -> int:
    adj = topo.adjacency()
    depth = {root: 0}
    frontier = [root]
    best = 0
    while frontier:
        nxt = []
        for u in frontier:
            for v, _ in adj[u]:
                if v not in depth:
                    depth[v] = depth[u] + 1
                    best = max(best, depth[v])
                    nxt.append(v)
        frontier = nxt
    return best


# --- shortest-path oracle -----------------------------------------------------

class LatencyOracle:
    """Shortest-path latency (and path bottleneck bandwidth) between node pairs.

    Small graphs keep the full all-pairs matrix; large ones compute rows on
    demand and cache per-pair results only, so memory stays bounded at
    8000-node scale.
    """

    FULL_MATRIX_MAX = 2500

    def __init__(self, topo: PhysTopology):
        self.topo = topo
        self._build()

    def _build(self) -> None:
        n = self.topo.n
        self.n = n
        rows, cols, data = [], [], []
        self._link_bw: dict[tuple[int, int], float] = {}
        for link in self.topo.links:
            if not link.up:
                continue
            rows.append(link.a)
            cols.append(link.b)
            data.append(float(link.latency_us))
            key = (link.a, link.b) if link.a < link.b else (link.b, link.a)
            bw = self._link_bw.get(key)
            self._link_bw[key] = link.bw if bw is None else max(bw, link.bw)
        self._graph = sp.csr_matrix(
            (np.array(data), (np.array(rows), np.array(cols))), shape=(n, n))
        self._pair_cache: dict[tuple[int, int], tuple[Optional[int], float]] = {}
        self._full_dist = None
        self._full_pred = None
        self._row_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        if n <= self.FULL_MATRIX_MAX:
            self._full_dist, self._full_pred = dijkstra(
                self._graph, directed=False, return_predecessors=True)

    def invalidate(self) -> None:
        """Call after mutating link latencies or up flags."""
        self.topo.invalidate_caches()
        self._build()

    def _row(self, src: int) -> tuple[np.ndarray, np.ndarray]:
        cached = self._row_cache.get(src)
        if cached is None:
            dist, pred = dijkstra(
                self._graph, directed=False, indices=[src], return_predecessors=True)
            cached = (dist[0], pred[0])
            if len(self._row_cache) > 256:
                self._row_cache.clear()
            self._row_cache[src] = cached
        return cached

    def prefetch_pairs(self, pairs: Iterable[tuple[int, int]], chunk: int = 128) -> None:
        """Resolve many pairs at once, grouped by source to amortize Dijkstra."""
        by_src: dict[int, list[int]] = {}
        for a, b in pairs:
            key = (a, b) if a < b else (b, a)
            if key in self._pair_cache or self._full_dist is not None:
                continue
            by_src.setdefault(key[0], []).append(key[1])
        srcs = sorted(by_src)
        for i in range(0, len(srcs), chunk):
            batch = srcs[i:i + chunk]
            dist, pred = dijkstra(
                self._graph, directed=False, indices=batch, return_predecessors=True)
            for j, src in enumerate(batch):
                for dst in by_src[src]:
                    self._pair_cache[(src, dst)] = self._extract(src, dst, dist[j], pred[j])

    def _extract(self, src: int, dst: int, dist_row, pred_row) -> tuple[Optional[int], float]:
        d = dist_row[dst]
        if not np.isfinite(d):
            return (None, 0.0)
        bw = INF
        v = dst
        while v != src:
            u = int(pred_row[v])
            key = (u, v) if u < v else (v, u)
            bw = min(bw, self._link_bw[key])
            v = u
        return (int(round(d)), bw)

    def _pair(self, a: int, b: int) -> tuple[Optional[int], float]:
        if a == b:
            return (0, INF)
        key = (a, b) if a < b else (b, a)
        hit = self._pair_cache.get(key)
        if hit is not None:
            return hit
        if self._full_dist is not None:
            result = self._extract(key[0], key[1], self._full_dist[key[0]], self._full_pred[key[0]])
        else:
            dist_row, pred_row = self._row(key[0])
            result = self._extract(key[0], key[1], dist_row, pred_row)
        self._pair_cache[key] = result
        return result

    def latency_us(self, a: int, b: int) -> Optional[int]:
        if a not in self.topo.nodes or b not in self.topo.nodes:
            raise KeyError(f"unknown node id in pair ({a}, {b})")
        return self._pair(a, b)[0]

    def latency_ms(self, a: int, b: int) -> float:
        lat = self.latency_us(a, b)
        if lat is None:
            return INF
        return lat / US_PER_MS

    def bottleneck_bw(self, a: int, b: int) -> float:
        return self._pair(a, b)[1]

    def sssp_us(self, src: int) -> dict[int, Optional[int]]:
        """All latencies from one source (for lower-bound audits)."""
        if self._full_dist is not None:
            row = self._full_dist[src]
        else:
            row, _ = self._row(src)
        return {
            i: (int(round(row[i])) if np.isfinite(row[i]) else None)
            for i in range(self.n)
        }


def underlay_latency_ms(topo: PhysTopology, a: int, b: int,
                        oracle: Optional[LatencyOracle] = None) -> float:
    """Shortest-path one-way latency between two nodes, in ms."""
    oracle = oracle or LatencyOracle(topo)
    return oracle.latency_ms(a, b)


# --- measurement --------------------------------------------------------------

def sample_link_report(link: PhysLink, rng: random.Random, noise: float = 0.05,
                       reporter: Optional[int] = None) -> LinkMetrics:
    """Measured latency = truth * (1 + eps), eps uniform in [-noise, +noise]."""
    who = link.a if reporter is None else reporter
    if not link.up:
        return LinkMetrics(link.a, link.b, None, who, up=False)
    eps = rng.uniform(-noise, noise) if noise > 0 else 0.0
    measured = max(1, round(link.latency_us * (1.0 + eps)))
    return LinkMetrics(link.a, link.b, measured, who, up=True)


def degrade_links(topo: PhysTopology, fraction: float, factor: float,
                  rng: random.Random) -> list[PhysLink]:
    """Scale latency of a random subset of links (in place). Returns them."""
    count = round(len(topo.links) * fraction)
    picked = rng.sample(topo.links, count)
    for link in picked:
        link.latency_us = round(link.latency_us * factor)
    return picked


# --- edge-list file format ----------------------------------------------------

def save_topology(topo: PhysTopology, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(f"nodes {topo.n}\n")
        for i in sorted(topo.nodes):
            node = topo.nodes[i]
            fh.write(f"node {node.id} {node.zone} {node.uplink_bw:g} {node.compute:g}\n")
        for link in topo.links:
            fh.write(f"link {link.a} {link.b} {link.latency_ms:.3f} {link.bw:g}\n")


def load_topology(path: str, kind: str = ZONED_RANDOM) -> PhysTopology:
    nodes: dict[int, PhysNode] = {}
    links: list[PhysLink] = []
    declared = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                if parts[0] == "nodes":
                    declared = int(parts[1])
                elif parts[0] == "node":
                    nid, zone = int(parts[1]), int(parts[2])
                    nodes[nid] = PhysNode(nid, zone, float(parts[3]), float(parts[4]))
                elif parts[0] == "link":
                    a, b = int(parts[1]), int(parts[2])
                    links.append(PhysLink(a, b, round(float(parts[3]) * US_PER_MS), float(parts[4])))
                else:
                    raise ValueError(f"unknown record {parts[0]!r}")
            except (IndexError, ValueError) as exc:
                raise TopologyError(f"{path}:{lineno}: bad line {line!r} ({exc})") from exc
    if declared is not None and declared != len(nodes):
        raise TopologyError(f"{path}: header says {declared} nodes, file has {len(nodes)}")
    if sorted(nodes) != list(range(len(nodes))):
        raise TopologyError(f"{path}: node ids must be consecutive from 0")
    for link in links:
        if link.a not in nodes or link.b not in nodes:
            raise TopologyError(f"{path}: link references unknown node {link.a}-{link.b}")
    return PhysTopology(kind, nodes, links)
