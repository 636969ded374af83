import random

import pytest
from hypothesis import given, settings, strategies as st

from blocksdn.control import (ForkRateWindow, ROLE_BACKBONE, ROLE_INTRA,
                              assign_domains, fork_feedback, reassign_after_failure,
                              recommend_all)
from blocksdn.graphengine import partition

from conftest import make_view


# --- domain assignment --------------------------------------------------------------

def test_single_controller_owns_everything():
    domains = assign_domains(list(range(20)), [7])
    assert domains[7].clusters == list(range(20))


def test_four_controllers_twenty_clusters():
    domains = assign_domains(list(range(20)), [1, 2, 3, 4])
    sizes = [len(d.clusters) for d in domains.values()]
    assert sizes == [5, 5, 5, 5]
    together = sorted(c for d in domains.values() for c in d.clusters)
    assert together == list(range(20))


def test_three_controllers_twenty_clusters_balanced_within_one():
    domains = assign_domains(list(range(20)), [1, 2, 3])
    sizes = sorted((len(d.clusters) for d in domains.values()), reverse=True)
    assert sizes == [7, 7, 6]


def test_surplus_controllers_hold_empty_domains():
    domains = assign_domains([0, 1], [1, 2, 3, 4])
    sizes = sorted(len(d.clusters) for d in domains.values())
    assert sizes == [0, 0, 1, 1]


def test_failover_redistributes_balanced():
    domains = assign_domains(list(range(20)), [1, 2, 3])
    after = reassign_after_failure(domains, 2)
    assert after[2].state == "failed"
    assert after[2].clusters == []
    sizes = sorted(len(after[c].clusters) for c in (1, 3))
    assert sizes == [10, 10]
    together = sorted(c for ctl in (1, 3) for c in after[ctl].clusters)
    assert together == list(range(20))


def test_failover_last_controller_leaves_orphans():
    domains = assign_domains(list(range(4)), [1])
    after = reassign_after_failure(domains, 1)
    assert after[1].state == "failed"


@settings(max_examples=30)
@given(clusters=st.integers(1, 60), controllers=st.integers(1, 8),
       kills=st.lists(st.integers(0, 7), max_size=6))
def test_domain_partition_invariant_under_failures(clusters, controllers, kills):
    ids = list(range(100, 100 + controllers))
    domains = assign_domains(list(range(clusters)), ids)
    for kill in kills:
        ctl = 100 + (kill % controllers)
        domains = reassign_after_failure(domains, ctl)
        active = [c for c, d in domains.items() if d.state == "active"]
        owned = sorted(c for d in domains.values() for c in d.clusters)
        if active:
            assert owned == list(range(clusters))
            sizes = [len(domains[c].clusters) for c in active]
            assert max(sizes) - min(sizes) <= 1
        for ctl_id, dom in domains.items():
            if dom.state == "failed":
                assert dom.clusters == []


# --- recommendations ------------------------------------------------------------------

def two_cluster_view():
    lat = {}
    for a in range(10):
        for b in range(a + 1, 10):
            same = (a < 5) == (b < 5)
            lat[(a, b)] = random.Random(a * 100 + b).uniform(5, 20) if same else 90.0
    return make_view(lat, bw={i: 1000.0 if i % 5 == 0 else 100.0 for i in range(10)})


def test_cluster_of_two_recommends_each_other():
    view = make_view({(0, 1): 10.0}, bw={0: 1000.0, 1: 100.0})
    cmap = partition(view, 2)
    recs = recommend_all(view, cmap, k=4)
    assert recs[1].peer_ids() == [0]
    assert recs[1].role == ROLE_INTRA
    # node 0 is the head: backbone role, no other heads
    assert recs[0].role == ROLE_BACKBONE
    assert recs[0].peers == []


def test_nearest_k_with_head_included_matches_sort_oracle():
    rng = random.Random(3)
    lat = {}
    for a in range(10):
        for b in range(a + 1, 10):
            lat[(a, b)] = rng.uniform(5.0, 60.0)
    view = make_view(lat, bw={0: 1000.0, **{i: 100.0 for i in range(1, 10)}})
    cmap = partition(view, 10)
    assert cmap.cluster_count == 1
    head = cmap.heads[0][0]
    recs = recommend_all(view, cmap, k=4, inbound_cap_ratio=100.0)
    for node in range(10):
        if node == head:
            continue
        rec = recs[node]
        assert len(rec.peers) == 4
        assert rec.peer_ids()[0] == head
        others = sorted(
            ((view.pair_latency_us(node, o) / 1000.0, o) for o in range(10)
             if o not in (node, head)))
        expected = [o for _, o in others[:3]]
        assert rec.peer_ids()[1:] == expected
        # expected latencies carried per peer
        for peer, lat_ms in rec.peers:
            assert lat_ms == pytest.approx(view.pair_latency_us(node, peer) / 1000.0)


def test_inbound_cap_respected_for_non_heads():
    rng = random.Random(5)
    n = 30
    lat = {}
    for a in range(n):
        for b in range(a + 1, n):
            lat[(a, b)] = rng.uniform(5.0, 50.0)
    # node 1 is made hyper-attractive: everyone's nearest peer
    for b in range(2, n):
        lat[(1, b)] = 1.0
    view = make_view(lat, bw={0: 1000.0, **{i: 100.0 for i in range(1, n)}})
    cmap = partition(view, n)
    head = cmap.heads[0][0]
    k = 4
    recs = recommend_all(view, cmap, k=k, inbound_cap_ratio=1.5)
    inbound = {}
    for node, rec in recs.items():
        if rec.role != ROLE_INTRA:
            continue
        assert len(rec.peers) == min(k, n - 1)
        ids = rec.peer_ids()
        assert len(set(ids)) == len(ids)
        assert node not in ids
        for peer in ids:
            if peer != head:
                inbound[peer] = inbound.get(peer, 0) + 1
    assert inbound
    assert max(inbound.values()) <= 6  # ceil(1.5 * 4)


def test_head_backbone_peers_sorted_by_latency():
    view = two_cluster_view()
    cmap = partition(view, 5)
    recs = recommend_all(view, cmap, k=4, backbone_k=8)
    heads = sorted(h for h, _ in cmap.heads.values())
    for head in heads:
        rec = recs[head]
        assert rec.role == ROLE_BACKBONE
        assert len(rec.peers) == min(8, len(heads) - 1)
        lats = [lat for _, lat in rec.peers]
        assert lats == sorted(lats)


def test_recommendations_carry_epoch_and_no_self():
    view = two_cluster_view()
    cmap = partition(view, 5)
    recs = recommend_all(view, cmap, k=3)
    for node, rec in recs.items():
        assert rec.epoch == cmap.epoch
        assert node not in rec.peer_ids()


# --- fork feedback ---------------------------------------------------------------------

def window(rate, blocks=100):
    return ForkRateWindow(0.0, 1000.0, forks=round(rate * blocks), blocks=blocks)


def test_zero_rate_noop():
    assert not fork_feedback(window(0.0), previous_rate=0.0)


def test_absolute_threshold_fires():
    assert fork_feedback(window(0.08), previous_rate=0.04)


def test_relative_rule_fires_below_absolute():
    # 0.01 -> 0.02 doubles: fires even though 0.02 <= 0.05
    assert fork_feedback(window(0.02), previous_rate=0.01)


def test_no_trigger_when_stable():
    assert not fork_feedback(window(0.02), previous_rate=0.018)


def test_relative_rule_needs_positive_previous():
    assert not fork_feedback(window(0.02), previous_rate=0.0)
    assert not fork_feedback(window(0.02), previous_rate=None)


def test_rate_bounds():
    w = ForkRateWindow(0.0, 1000.0, forks=3, blocks=10)
    assert w.rate == pytest.approx(0.3)
    empty = ForkRateWindow(0.0, 1000.0)
    assert empty.rate == 0.0


@given(rates=st.lists(st.floats(0.0, 0.2), min_size=2, max_size=20),
       lo=st.floats(0.01, 0.1), hi_delta=st.floats(0.001, 0.2))
def test_raising_threshold_never_increases_triggers(rates, lo, hi_delta):
    hi = lo + hi_delta

    def count(threshold):
        triggers = 0
        prev = None
        for r in rates:
            w = window(r, blocks=1000)
            if fork_feedback(w, prev, high_threshold=threshold):
                triggers += 1
            prev = w.rate
        return triggers

    assert count(hi) <= count(lo)
