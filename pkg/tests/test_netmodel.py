import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from blocksdn.engine import RngStreams
from blocksdn.netmodel import (LatencyOracle, PhysLink, PhysNode, PhysTopology,
                               TopologyError, TopologySpec, check_topology,
                               degrade_links, generate_topology, load_topology,
                               sample_link_report, save_topology,
                               transmission_delay_ms, underlay_latency_ms)


def rng(seed=1):
    return random.Random(seed)


def spec(**kw) -> TopologySpec:
    return TopologySpec(**kw)


# --- transmission delay ---------------------------------------------------------

def test_delay_formula_hand_value():
    link = PhysLink(0, 1, latency_us=10_000, bw=100.0)
    sender = PhysNode(0, 0, uplink_bw=1000.0, compute=1.0)
    # 10ms + 1MB * 8 / 100Mbps = 10 + 80 = 90ms
    assert transmission_delay_ms(link, 1.0, sender) == pytest.approx(90.0)


def test_delay_latency_floor_as_size_vanishes():
    link = PhysLink(0, 1, latency_us=10_000, bw=100.0)
    sender = PhysNode(0, 0, uplink_bw=1000.0, compute=1.0)
    assert transmission_delay_ms(link, 1e-9, sender) == pytest.approx(10.0, abs=1e-3)


def test_delay_sender_uplink_binds():
    link = PhysLink(0, 1, latency_us=10_000, bw=1000.0)
    slow = PhysNode(0, 0, uplink_bw=50.0, compute=1.0)
    assert transmission_delay_ms(link, 1.0, slow) == pytest.approx(10.0 + 160.0)


def test_delay_size_difference_matches_formula():
    link = PhysLink(0, 1, latency_us=10_000, bw=100.0)
    sender = PhysNode(0, 0, uplink_bw=1000.0, compute=1.0)
    d3 = transmission_delay_ms(link, 3.0, sender)
    d05 = transmission_delay_ms(link, 0.5, sender)
    assert d3 > d05
    assert d3 - d05 == pytest.approx(2.5 * 8 / 100.0 * 1000.0)


@given(st.floats(0.01, 10.0), st.floats(0.02, 10.0))
def test_delay_monotone_in_size(size_a, size_b):
    link = PhysLink(0, 1, latency_us=5_000, bw=80.0)
    sender = PhysNode(0, 0, uplink_bw=120.0, compute=1.0)
    lo, hi = sorted((size_a, size_b))
    if lo == hi:
        return
    assert transmission_delay_ms(link, lo, sender) < transmission_delay_ms(link, hi, sender)


def test_delay_on_down_link_raises():
    link = PhysLink(0, 1, latency_us=5_000, bw=80.0, up=False)
    sender = PhysNode(0, 0, uplink_bw=120.0, compute=1.0)
    with pytest.raises(TopologyError):
        transmission_delay_ms(link, 1.0, sender)


# --- generators -------------------------------------------------------------------

def test_star_node_and_link_counts():
    topo = generate_topology(spec(kind="star", n=1000), rng())
    assert len(topo.links) == 999
    assert topo.degree(0) == 999
    assert check_topology(topo, "star") == []


def test_ring_local_rings_and_backbone():
    topo = generate_topology(spec(kind="ring", n=1000, local_rings=10), rng())
    # 10 local rings of exactly 100 nodes
    sizes = {}
    for node in topo.nodes.values():
        sizes[node.zone] = sizes.get(node.zone, 0) + 1
    assert sorted(sizes.values()) == [100] * 10
    # gateways carry two extra backbone links
    deg4 = [u for u in topo.nodes if topo.degree(u) == 4]
    assert len(deg4) == 10
    assert check_topology(topo, "ring", expected_rings=10) == []


def test_tree_depth_exact():
    topo = generate_topology(spec(kind="tree", n=1000, tree_depth=5), rng())
    assert len(topo.links) == 999
    assert check_topology(topo, "tree", expected_depth=5) == []


def test_tree_infeasible_depth():
    with pytest.raises(TopologyError):
        generate_topology(spec(kind="tree", n=4, tree_depth=10), rng())


def test_too_few_nodes():
    with pytest.raises(TopologyError):
        generate_topology(spec(kind="star", n=1), rng())


@settings(max_examples=25)
@given(
    kind=st.sampled_from(["zoned-random", "ring", "star", "tree"]),
    n=st.integers(12, 120),
    seed=st.integers(0, 999),
)
def test_generated_topologies_connected(kind, n, seed):
    kw = {"kind": kind, "n": n}
    if kind == "ring":
        kw["local_rings"] = max(1, n // 10)
    if kind == "tree":
        kw["tree_depth"] = min(4, n - 1)
    if kind == "zoned-random":
        kw["zones"] = max(1, n // 15)
    topo = generate_topology(spec(**kw), rng(seed))
    assert topo.is_connected()
    assert sorted(topo.nodes) == list(range(n))
    for node in topo.nodes.values():
        assert node.uplink_bw > 0 and node.compute > 0
    for link in topo.links:
        assert link.latency_us >= 1 and link.bw > 0 and link.a != link.b


# --- shortest paths -----------------------------------------------------------------

def test_latency_self_is_zero():
    topo = generate_topology(spec(kind="star", n=10), rng())
    assert underlay_latency_ms(topo, 3, 3) == 0


def test_latency_single_link():
    nodes = {0: PhysNode(0, 0, 100, 1), 1: PhysNode(1, 0, 100, 1)}
    topo = PhysTopology("zoned-random", nodes, [PhysLink(0, 1, 5_000, 100.0)])
    assert underlay_latency_ms(topo, 0, 1) == pytest.approx(5.0)


def test_unknown_node_raises():
    nodes = {0: PhysNode(0, 0, 100, 1), 1: PhysNode(1, 0, 100, 1)}
    topo = PhysTopology("zoned-random", nodes, [PhysLink(0, 1, 5_000, 100.0)])
    oracle = LatencyOracle(topo)
    with pytest.raises(KeyError):
        oracle.latency_us(0, 7)


def floyd_warshall(topo: PhysTopology):
    n = topo.n
    dist = [[math.inf] * n for _ in range(n)]
    for i in range(n):
        dist[i][i] = 0
    for link in topo.links:
        w = link.latency_us
        if w < dist[link.a][link.b]:
            dist[link.a][link.b] = w
            dist[link.b][link.a] = w
    for k in range(n):
        dk = dist[k]
        for i in range(n):
            dik = dist[i][k]
            if dik == math.inf:
                continue
            di = dist[i]
            for j in range(n):
                alt = dik + dk[j]
                if alt < di[j]:
                    di[j] = alt
    return dist


def test_oracle_matches_floyd_warshall_on_random_graph():
    topo = generate_topology(spec(kind="zoned-random", n=50, zones=3), rng(9))
    oracle = LatencyOracle(topo)
    expected = floyd_warshall(topo)
    for a in range(50):
        for b in range(a + 1, 50):
            assert oracle.latency_us(a, b) == expected[a][b]


def test_oracle_triangle_inequality_and_symmetry():
    topo = generate_topology(spec(kind="zoned-random", n=40, zones=4), rng(3))
    oracle = LatencyOracle(topo)
    ids = sorted(topo.nodes)
    for a in ids[:10]:
        for b in ids[10:20]:
            assert oracle.latency_us(a, b) == oracle.latency_us(b, a)
            for c in ids[20:25]:
                assert (oracle.latency_us(a, c)
                        <= oracle.latency_us(a, b) + oracle.latency_us(b, c))


def test_oracle_row_cache_path_matches_full_matrix():
    topo = generate_topology(spec(kind="zoned-random", n=60, zones=3), rng(4))
    full = LatencyOracle(topo)
    lazy = LatencyOracle(topo)
    lazy._full_dist = None  # force the on-demand row path
    lazy._full_pred = None
    pairs = [(1, 50), (3, 44), (10, 59), (0, 30)]
    lazy.prefetch_pairs(pairs)
    for a, b in pairs:
        assert lazy.latency_us(a, b) == full.latency_us(a, b)
        assert lazy.bottleneck_bw(a, b) == full.bottleneck_bw(a, b)


def test_bottleneck_bw_single_link():
    nodes = {0: PhysNode(0, 0, 100, 1), 1: PhysNode(1, 0, 100, 1)}
    topo = PhysTopology("zoned-random", nodes, [PhysLink(0, 1, 5_000, 77.0)])
    oracle = LatencyOracle(topo)
    assert oracle.bottleneck_bw(0, 1) == 77.0


# --- measurement ----------------------------------------------------------------------

def test_zero_noise_report_equals_truth():
    link = PhysLink(0, 1, 100_000, 100.0)
    report = sample_link_report(link, rng(), noise=0.0)
    assert report.latency_us == 100_000
    assert report.up


def test_noise_bounds_hold_over_many_samples():
    link = PhysLink(0, 1, 100_000, 100.0)
    r = rng(11)
    for _ in range(10_000):
        m = sample_link_report(link, r, noise=0.05)
        assert 95_000 <= m.latency_us <= 105_000


def test_down_link_reported_unavailable():
    link = PhysLink(0, 1, 100_000, 100.0, up=False)
    report = sample_link_report(link, rng(), noise=0.05)
    assert not report.up
    assert report.latency_us is None


def test_degrade_links_scales_and_invalidates():
    topo = generate_topology(spec(kind="zoned-random", n=30, zones=2), rng(5))
    oracle = LatencyOracle(topo)
    before = {(l.a, l.b): l.latency_us for l in topo.links}
    changed = degrade_links(topo, 0.2, 3.0, rng(6))
    assert len(changed) == round(len(topo.links) * 0.2)
    for link in changed:
        assert link.latency_us == before[(link.a, link.b)] * 3
    oracle.invalidate()
    assert oracle.latency_us(0, 1) is not None


# --- edge-list round trip ---------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    topo = generate_topology(spec(kind="zoned-random", n=25, zones=2), rng(8))
    path = tmp_path / "t.topo"
    save_topology(topo, str(path))
    loaded = load_topology(str(path))
    assert loaded.n == topo.n
    assert len(loaded.links) == len(topo.links)
    for orig, back in zip(topo.links, loaded.links):
        assert (orig.a, orig.b, orig.latency_us, orig.bw) == \
               (back.a, back.b, back.latency_us, back.bw)
    for nid in topo.nodes:
        assert loaded.nodes[nid].zone == topo.nodes[nid].zone
        assert loaded.nodes[nid].uplink_bw == topo.nodes[nid].uplink_bw


def test_load_rejects_malformed(tmp_path):
    path = tmp_path / "bad.topo"
    path.write_text("nodes 2\nnode 0 0 100 1\nnode 1 0 100 1\nlink 0 nonsense 5 100\n")
    with pytest.raises(TopologyError) as err:
        load_topology(str(path))
    assert ":4" in str(err.value)


def test_load_rejects_gap_in_ids(tmp_path):
    path = tmp_path / "gap.topo"
    path.write_text("nodes 2\nnode 0 0 100 1\nnode 5 0 100 1\nlink 0 5 5 100\n")
    with pytest.raises(TopologyError):
        load_topology(str(path))
