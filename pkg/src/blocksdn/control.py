"""Control-plane logic: domain assignment, neighbor recommendations, and
fork-rate feedback. The event-driven collection choreography lives in the
run loop; everything here is a pure function of the view and cluster map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from .graphengine import ClusterMap, GlobalView

ROLE_INTRA = "intra-cluster"
ROLE_BACKBONE = "head-backbone"


@dataclass
class ControlDomain:
    controller_id: int
    clusters: list[int]
    nodes: list[int]
    state: str = "active"


@dataclass
class NeighborRecommendation:
    node: int
    peers: list[tuple[int, float]]            # (peer id, expected latency ms), ordered
    epoch: int
    role: str
    backups: list[tuple[int, float]] = field(default_factory=list)
    push_children: list[int] = field(default_factory=list)

    def peer_ids(self) -> list[int]:
        return [p for p, _ in self.peers]


@dataclass
class ForkRateWindow:
    start_ms: float
    length_ms: float
    forks: int = 0
    blocks: int = 0

    @property
    def rate(self) -> float:
        return self.forks / self.blocks if self.blocks else 0.0


def assign_domains(cluster_ids: list[int], controller_ids: list[int],
                   cmap: Optional[ClusterMap] = None) -> dict[int, ControlDomain]:
    """Split clusters across controllers, balanced within one cluster.

    Clusters are never split; surplus controllers get empty domains.
    """
    if not controller_ids:
        raise ValueError("need at least one controller")
    controllers = sorted(controller_ids)
    clusters = sorted(cluster_ids)
    k = len(controllers)
    base, extra = divmod(len(clusters), k)
    domains: dict[int, ControlDomain] = {}
    at = 0
    for i, ctl in enumerate(controllers):
        size = base + (1 if i < extra else 0)
        chunk = clusters[at:at + size]
        at += size
        nodes = []
        if cmap is not None:
            for cid in chunk:
                nodes.extend(cmap.members[cid])
        domains[ctl] = ControlDomain(ctl, chunk, sorted(nodes))
    return domains


def reassign_after_failure(domains: dict[int, ControlDomain], failed: int,
                           cmap: Optional[ClusterMap] = None) -> dict[int, ControlDomain]:
    """Redistribute a failed controller's clusters over the survivors,
    keeping the within-one-cluster balance."""
    survivors = sorted(c for c, d in domains.items() if d.state == "active" and c != failed)
    orphaned = domains[failed].clusters if failed in domains else []
    domains = dict(domains)
    if failed in domains:
        domains[failed] = ControlDomain(failed, [], [], state="failed")
    if not survivors:
        return domains
    merged = sorted(c for ctl in survivors for c in domains[ctl].clusters) + sorted(orphaned)
    balanced = assign_domains(sorted(merged), survivors, cmap)
    for ctl, dom in balanced.items():
        domains[ctl] = dom
    return domains


def recommend_all(view: GlobalView, cmap: ClusterMap, *, k: int = 8,
                  inbound_cap_ratio: float = 1.5, backbone_k: int = 8,
                  backup_count: Optional[int] = None,
                  ) -> dict[int, NeighborRecommendation]:
    """Macro neighbor selection for every online node in the map.

    Non-heads get the nearest same-cluster peers by view latency with the
    head always present, under a greedy inbound-degree cap of
    ceil(inbound_cap_ratio * k) (the head is exempt: every member keeps a
    link to it). Heads get the nearest other heads as backbone peers.
    """
    cap = math.ceil(inbound_cap_ratio * k)
    if backup_count is None:
        backup_count = k
    epoch = cmap.epoch
    recs: dict[int, NeighborRecommendation] = {}

    head_ids = sorted(head for head, _ in cmap.heads.values())
    kb = min(backbone_k, len(head_ids) - 1)
    for head in head_ids:
        ranked = sorted(
            ((view.pair_latency_us(head, other) / 1000.0, other)
             for other in head_ids if other != head))
        peers = [(other, lat) for lat, other in ranked[:kb]]
        backups = [(other, lat) for lat, other in ranked[kb:kb + backup_count]]
        recs[head] = NeighborRecommendation(head, peers, epoch, ROLE_BACKBONE, backups)

    for cid, members in cmap.members.items():
        head = cmap.heads[cid][0]
        inbound = {m: 0 for m in members}
        want = {}
        ranked_cache = {}
        for node in members:
            if node == head:
                continue
            ranked = sorted(
                ((view.pair_latency_us(node, other) / 1000.0, other)
                 for other in members if other not in (node, head)))
            ranked_cache[node] = ranked
            want[node] = min(k, len(members) - 1)
        for node in sorted(want):
            head_lat = view.pair_latency_us(node, head) / 1000.0
            peers = [(head, head_lat)]
            chosen = {head}
            for lat, other in ranked_cache[node]:
                if len(peers) >= want[node]:
                    break
                if inbound[other] >= cap:
                    continue
                peers.append((other, lat))
                chosen.add(other)
                inbound[other] += 1
            if len(peers) < want[node]:  # cap unsatisfiable; fill by latency
                for lat, other in ranked_cache[node]:
                    if len(peers) >= want[node]:
                        break
                    if other in chosen:
                        continue
                    peers.append((other, lat))
                    chosen.add(other)
                    inbound[other] += 1
            backups = [(other, lat) for lat, other in ranked_cache[node]
                       if other not in chosen][:backup_count]
            recs[node] = NeighborRecommendation(node, peers, epoch, ROLE_INTRA, backups)
    return recs


def fork_feedback(window: ForkRateWindow, previous_rate: Optional[float],
                  high_threshold: float = 0.05, relative_increase: float = 0.5,
                  ) -> bool:
    """True when the controller should trigger an out-of-band reconfiguration:
    rate above the absolute threshold, or grown by the relative factor over
    the previous window."""
    rate = window.rate
    if rate > high_threshold:
        return True
    if previous_rate is not None and previous_rate > 0:
        if rate >= previous_rate * (1.0 + relative_increase):
            return True
    return False
