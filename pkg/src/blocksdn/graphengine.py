"""Controller-side graph engine: global view, resource-aware clustering,
cluster-head election, and BFS layering.

Clustering is agglomerative average-linkage over measured link latencies
with a size cap and a merge threshold at the global median; stragglers
with no usable measurements are packed by zone so the cluster count stays
near n / target even on degenerate graphs (star leaves, isolated reports).
"""
from __future__ import annotations

import heapq
import math
import statistics
from dataclasses import dataclass, field
from typing import Optional

from .engine import US_PER_MS
from .netmodel import LinkMetrics


class ViewError(ValueError):
    """A collection cycle produced an unusable view."""


@dataclass(slots=True)
class NodeRecord:
    id: int
    zone: int
    bw: float
    compute: float
    online: bool
    degree: int


@dataclass(slots=True)
class NodeReport:
    epoch: int
    record: NodeRecord


@dataclass(slots=True)
class LinkReportMsg:
    epoch: int
    metrics: LinkMetrics


@dataclass
class GlobalView:
    """Snapshot the controllers cluster and recommend from.

    edges hold measured pair latencies (integer us, keys (a,b) with a<b);
    anything unmeasured is imputed from zone-pair means, completed over the
    zone graph by all-pairs shortest path so distant zone pairs still get
    a sane estimate.
    """
    nodes: dict[int, NodeRecord]
    edges: dict[tuple[int, int], int]
    version: int
    _zone_matrix: Optional[dict[tuple[int, int], int]] = field(default=None, repr=False)
    _global_mean: int = field(default=0, repr=False)

    def online_ids(self) -> list[int]:
        return sorted(i for i, rec in self.nodes.items() if rec.online)

    def _zone_means(self) -> dict[tuple[int, int], int]:
        if self._zone_matrix is not None:
            return self._zone_matrix
        sums: dict[tuple[int, int], list[int]] = {}
        for (a, b), lat in self.edges.items():
            za, zb = self.nodes[a].zone, self.nodes[b].zone
            key = (min(za, zb), max(za, zb))
            sums.setdefault(key, []).append(lat)
        means = {key: round(sum(v) / len(v)) for key, v in sums.items()}
        zones = sorted({rec.zone for rec in self.nodes.values()})
        self._global_mean = (
            round(sum(self.edges.values()) / len(self.edges)) if self.edges else US_PER_MS * 50
        )
        # complete missing zone pairs by shortest path over the zone graph
        full: dict[tuple[int, int], int] = {}
        for zi in zones:
            dist = {z: math.inf for z in zones}
            dist[zi] = 0
            heap = [(0, zi)]
            while heap:
                d, z = heapq.heappop(heap)
                if d > dist[z]:
                    continue
                for zo in zones:
                    key = (min(z, zo), max(z, zo))
                    w = means.get(key)
                    if w is None or zo == z:
                        continue
                    nd = d + w
                    if nd < dist[zo]:
                        dist[zo] = nd
                        heapq.heappush(heap, (nd, zo))
            for zj in zones:
                if zj < zi:
                    continue
                key = (zi, zj)
                if key in means:
                    full[key] = means[key]
                elif math.isfinite(dist[zj]) and zi != zj:
                    full[key] = round(dist[zj])
                else:
                    full[key] = self._global_mean
        self._zone_matrix = full
        return full

    def pair_latency_us(self, a: int, b: int) -> int:
        """Measured latency when known, zone-pair imputation otherwise."""
        if a == b:
            return 0
        key = (a, b) if a < b else (b, a)
        lat = self.edges.get(key)
        if lat is not None:
            return lat
        za, zb = self.nodes[a].zone, self.nodes[b].zone
        means = self._zone_means()
        return means.get((min(za, zb), max(za, zb)), self._global_mean)


def build_view(node_reports: list[NodeReport], link_reports: list[LinkReportMsg],
               version: int, expected_epoch: int) -> GlobalView:
    """Assemble a view from the current epoch's reports; stale epochs dropped."""
    nodes: dict[int, NodeRecord] = {}
    for rep in node_reports:
        if rep.epoch != expected_epoch:
            continue
        if rep.record.online:
            nodes[rep.record.id] = rep.record
    if not nodes:
        raise ViewError(f"no usable node reports for epoch {expected_epoch}")
    sums: dict[tuple[int, int], list[int]] = {}
    for rep in link_reports:
        if rep.epoch != expected_epoch:
            continue
        m = rep.metrics
        if not m.up or m.latency_us is None:
            continue
        if m.a not in nodes or m.b not in nodes:
            continue
        key = (m.a, m.b) if m.a < m.b else (m.b, m.a)
        sums.setdefault(key, []).append(m.latency_us)
    edges = {key: round(sum(v) / len(v)) for key, v in sums.items()}
    return GlobalView(nodes=nodes, edges=edges, version=version)


# --- capacity ------------------------------------------------------------------

def capacity_scores(view: GlobalView, w_bw: float = 0.6, w_compute: float = 0.4) -> dict[int, float]:
    """Min-max normalized bandwidth/compute blend; invariant under positive
    affine rescaling of either raw metric."""
    ids = view.online_ids()
    bws = [view.nodes[i].bw for i in ids]
    cps = [view.nodes[i].compute for i in ids]

    def norm(values):
        lo, hi = min(values), max(values)
        if hi == lo:
            return {i: 0.5 for i in ids}
        return {i: (v - lo) / (hi - lo) for i, v in zip(ids, values)}

    nb, nc = norm(bws), norm(cps)
    return {i: w_bw * nb[i] + w_compute * nc[i] for i in ids}


def elect_heads(view: GlobalView, members: list[int],
                scores: Optional[dict[int, float]] = None,
                w_bw: float = 0.6, w_compute: float = 0.4) -> tuple[int, int]:
    """Head = capacity argmax (ties to lowest id), deputy = runner-up."""
    if not members:
        raise ValueError("cannot elect a head for an empty cluster")
    if scores is None:
        scores = capacity_scores(view, w_bw, w_compute)
    ranked = sorted(members, key=lambda i: (-scores[i], i))
    head = ranked[0]
    deputy = ranked[1] if len(ranked) > 1 else head
    return head, deputy


# --- layering ------------------------------------------------------------------

def layer_assignment(view: GlobalView, members: list[int], head: int,
                     threshold_us: Optional[int] = None,
                     scores: Optional[dict[int, float]] = None,
                     ) -> tuple[dict[int, int], dict[int, Optional[int]]]:
    """BFS layers over intra-cluster measured edges under the latency
    threshold (default: the cluster's median measured latency). Members the
    BFS cannot reach attach directly to the head at layer 1.

    Parents are balanced among a node's previous-layer neighbors, preferring
    lightly loaded, high-capacity, nearby parents, which spreads push load
    without changing any BFS depth.
    """
    if head not in members:
        raise ValueError("head must belong to the cluster")
    member_set = set(members)
    intra = {}
    for (a, b), lat in view.edges.items():
        if a in member_set and b in member_set:
            intra[(a, b)] = lat
    if threshold_us is None and intra:
        threshold_us = round(statistics.median(intra.values()))
    adj: dict[int, list[tuple[int, int]]] = {m: [] for m in members}
    for (a, b), lat in intra.items():
        if threshold_us is not None and lat > threshold_us:
            continue
        adj[a].append((b, lat))
        adj[b].append((a, lat))

    layer = {head: 0}
    frontier = [head]
    order = [head]
    while frontier:
        nxt = []
        for u in sorted(frontier):
            for v, _ in adj[u]:
                if v not in layer:
                    layer[v] = layer[u] + 1
                    nxt.append(v)
        frontier = nxt
        order.extend(sorted(nxt))

    if scores is None:
        scores = {m: 0.0 for m in members}
    parent: dict[int, Optional[int]] = {head: None}
    load: dict[int, int] = {m: 0 for m in members}
    for v in order:
        if v == head:
            continue
        candidates = [(u, lat) for u, lat in adj[v] if layer.get(u) == layer[v] - 1]
        best = min(candidates, key=lambda c: (load[c[0]], -scores[c[0]], c[1], c[0]))[0]
        parent[v] = best
        load[best] += 1
    for v in sorted(member_set - set(layer)):
        layer[v] = 1
        parent[v] = head
        load[head] += 1
    return layer, parent


# --- cluster map ----------------------------------------------------------------

@dataclass
class ClusterMap:
    cluster_of: dict[int, int]
    members: dict[int, list[int]]
    heads: dict[int, tuple[int, int]]       # cluster -> (head, deputy)
    layer_of: dict[int, int]
    parent_of: dict[int, Optional[int]]
    epoch: int

    @property
    def cluster_count(self) -> int:
        return len(self.members)

    def head_of(self, node: int) -> int:
        return self.heads[self.cluster_of[node]][0]

    def validate(self) -> list[str]:
        problems = []
        seen: set[int] = set()
        for cid, mem in self.members.items():
            if not mem:
                problems.append(f"cluster {cid} is empty")
                continue
            dup = seen.intersection(mem)
            if dup:
                problems.append(f"nodes {sorted(dup)} appear in multiple clusters")
            seen.update(mem)
            head, deputy = self.heads[cid]
            if head not in mem or deputy not in mem:
                problems.append(f"cluster {cid} head/deputy not members")
            if len(mem) >= 2 and head == deputy:
                problems.append(f"cluster {cid} head == deputy with size >= 2")
            if self.layer_of.get(head) != 0:
                problems.append(f"cluster {cid} head not at layer 0")
            for node in mem:
                if self.cluster_of.get(node) != cid:
                    problems.append(f"node {node} cluster_of mismatch")
                if node == head:
                    continue
                par = self.parent_of.get(node)
                if par is None or par not in mem:
                    problems.append(f"node {node} has no intra-cluster parent")
                elif self.layer_of[node] != self.layer_of[par] + 1:
                    problems.append(f"node {node} layer != parent layer + 1")
        extra = set(self.cluster_of) - seen
        if extra:
            problems.append(f"cluster_of references non-member nodes {sorted(extra)}")
        return problems


def dump_cluster_map(cmap: ClusterMap) -> str:
    """One line per node: id, cluster, layer, is_head."""
    lines = []
    for node in sorted(cmap.cluster_of):
        cid = cmap.cluster_of[node]
        is_head = 1 if cmap.heads[cid][0] == node else 0
        lines.append(f"{node} {cid} {cmap.layer_of[node]} {is_head}")
    return "\n".join(lines) + "\n"


def partition(view: GlobalView, target_cluster_size: int, *,
              cap_factor: float = 2.0,
              w_bw: float = 0.6, w_compute: float = 0.4,
              merge_threshold_us: Optional[int] = None,
              threshold_factor: float = 2.0) -> ClusterMap:
    """Group online nodes into latency communities of roughly the target size.

    Average-linkage agglomerative merging over measured edges, stopped at
    ceil(n/target) clusters, a 2x-target size cap, or linkage above the
    merge threshold (threshold_factor times the global median latency, which
    tolerates within-community spread while still refusing merges across a
    community boundary); leftovers without usable edges pack by zone.
    """
    if target_cluster_size < 2:
        raise ValueError("target_cluster_size must be >= 2")
    ids = view.online_ids()
    if not ids:
        raise ViewError("cannot partition an empty view")
    n = len(ids)
    scores = capacity_scores(view, w_bw, w_compute)
    if n == 1:
        only = ids[0]
        return ClusterMap({only: 0}, {0: [only]}, {0: (only, only)},
                          {only: 0}, {only: None}, view.version)

    target_count = math.ceil(n / target_cluster_size)
    cap = max(2, round(target_cluster_size * cap_factor))
    lats = list(view.edges.values())
    threshold = merge_threshold_us
    if threshold is None:
        threshold = round(statistics.median(lats) * threshold_factor) if lats else 0

    cid_of = {u: u for u in ids}
    members: dict[int, list[int]] = {u: [u] for u in ids}
    stamp = {u: 0 for u in ids}
    neigh: dict[int, dict[int, list[float]]] = {u: {} for u in ids}  # cid -> cid -> [sum, cnt]
    for (a, b), lat in view.edges.items():
        if a not in cid_of or b not in cid_of:
            continue
        for x, y in ((a, b), (b, a)):
            cell = neigh[x].setdefault(y, [0.0, 0])
            cell[0] += lat
            cell[1] += 1

    heap: list[tuple[float, int, int, int, int]] = []
    for a in ids:
        for b, (s, c) in neigh[a].items():
            if a < b:
                heapq.heappush(heap, (s / c, a, b, 0, 0))

    count = n
    while count > target_count and heap:
        avg, a, b, sa, sb = heapq.heappop(heap)
        if stamp.get(a) != sa or stamp.get(b) != sb:
            continue
        if avg > threshold:
            break
        if len(members[a]) + len(members[b]) > cap:
            continue
        # merge b into a
        if len(members[a]) < len(members[b]):
            a, b = b, a
        members[a].extend(members[b])
        for u in members[b]:
            cid_of[u] = a
        stamp[a] += 1
        nb = neigh.pop(b)
        na = neigh[a]
        del stamp[b]
        del members[b]
        na.pop(b, None)
        nb.pop(a, None)
        for other, (s, c) in nb.items():
            cell = na.setdefault(other, [0.0, 0])
            cell[0] += s
            cell[1] += c
            onb = neigh[other]
            ocell = onb.setdefault(a, [0.0, 0])
            ocell[0] += s
            ocell[1] += c
            onb.pop(b, None)
        for other, (s, c) in na.items():
            lo, hi = (a, other) if a < other else (other, a)
            heapq.heappush(heap, (s / c, lo, hi, stamp[lo], stamp[hi]))
        count -= 1

    # pack stragglers (no mergeable measured edges) by zone, in id order
    if count > target_count:
        small = sorted(
            (cid for cid in members if len(members[cid]) <= target_cluster_size // 2),
            key=lambda cid: min(members[cid]))
        by_zone: dict[int, list[int]] = {}
        for cid in small:
            zone = view.nodes[min(members[cid])].zone
            by_zone.setdefault(zone, []).append(cid)
        for zone in sorted(by_zone):
            group = by_zone[zone]
            acc: Optional[int] = None
            for cid in group:
                if acc is None:
                    acc = cid
                    continue
                if len(members[acc]) + len(members[cid]) > target_cluster_size:
                    acc = cid
                    continue
                members[acc].extend(members[cid])
                for u in members[cid]:
                    cid_of[u] = acc
                del members[cid]
                count -= 1

    # canonical cluster ids: ascending minimum member id
    final = sorted(members.values(), key=min)
    cluster_of: dict[int, int] = {}
    members_out: dict[int, list[int]] = {}
    heads: dict[int, tuple[int, int]] = {}
    layer_of: dict[int, int] = {}
    parent_of: dict[int, Optional[int]] = {}
    for cid, mem in enumerate(final):
        mem = sorted(mem)
        members_out[cid] = mem
        for u in mem:
            cluster_of[u] = cid
        head, deputy = elect_heads(view, mem, scores)
        heads[cid] = (head, deputy)
        layers, parents = layer_assignment(view, mem, head, scores=scores)
        layer_of.update(layers)
        parent_of.update(parents)
    return ClusterMap(cluster_of, members_out, heads, layer_of, parent_of, view.version)
