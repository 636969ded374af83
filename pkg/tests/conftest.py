import os

import pytest
from hypothesis import settings

from blocksdn.config import RunConfig
from blocksdn.graphengine import GlobalView, NodeRecord

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")

LARGE_ENABLED = os.environ.get("BLOCKSDN_LARGE", "") == "1"


def pytest_collection_modifyitems(config, items):
    if LARGE_ENABLED:
        return
    skip = pytest.mark.skip(reason="large-scale sweep; set BLOCKSDN_LARGE=1")
    for item in items:
        if "large" in item.keywords:
            item.add_marker(skip)


def make_view(latencies: dict, *, bw=None, compute=None, zones=None, version=1,
              online=None) -> GlobalView:
    """Build a view straight from a pair-latency dict (ms values)."""
    ids = sorted({u for pair in latencies for u in pair} |
                 set(bw or {}) | set(compute or {}) | set(zones or {}))
    nodes = {}
    for u in ids:
        nodes[u] = NodeRecord(
            id=u,
            zone=(zones or {}).get(u, 0),
            bw=(bw or {}).get(u, 100.0),
            compute=(compute or {}).get(u, 1.0),
            online=(online or {}).get(u, True),
            degree=0,
        )
    edges = {}
    for (a, b), ms in latencies.items():
        key = (a, b) if a < b else (b, a)
        edges[key] = round(ms * 1000)
    return GlobalView(nodes=nodes, edges=edges, version=version)


@pytest.fixture
def tiny_cfg():
    """Config sized for sub-second simulations."""
    return RunConfig(
        n=60, zones=4, seeds=(1,), warmup_s=4.0, control_period_s=3.0,
        blocks_per_run=2, block_spacing_s=5.0, target_cluster_size=12,
        micro_interval_s=10.0,
    ).resolve()


@pytest.fixture
def mid_cfg():
    return RunConfig(
        n=150, zones=5, seeds=(1,), warmup_s=5.0, control_period_s=4.0,
        blocks_per_run=2, block_spacing_s=6.0, target_cluster_size=25,
    ).resolve()
