import math
import random
import statistics

import pytest
from scipy import stats as scipy_stats

from blocksdn.chain import (ACCEPT, Block, ChainState, DUPLICATE, ORPHANED,
                            produce_schedule, throughput_tps, validation_delay_us)


def blk(bid, height=1, parent=None, size=1.0, producer=0, born=0):
    return Block(bid, height, parent, size, tx_count=round(2000 * size),
                 producer=producer, born_us=born)


# --- validation delay -----------------------------------------------------------------

def test_validation_delay_formula():
    # 50 ms/MB, compute 2.0, 1 MB -> 25 ms
    assert validation_delay_us(1.0, 2.0, 50.0) == 25_000


def test_validation_scales_with_size():
    assert validation_delay_us(3.0, 1.0, 50.0) == 150_000


# --- production schedule -----------------------------------------------------------------

def test_poisson_mean_within_three_sigma():
    # rate 1 block / 10 s over 100 s -> lambda = 10 per run
    counts = []
    for seed in range(100):
        sched = produce_schedule(100_000_000, 0.1, [0], [1.0], random.Random(seed))
        counts.append(len(sched))
    mean = statistics.mean(counts)
    sigma = math.sqrt(10.0 / 100)
    assert abs(mean - 10.0) <= 3 * sigma


def test_single_producer_gets_all_blocks():
    sched = produce_schedule(50_000_000, 0.5, [7], [1.0], random.Random(1))
    assert sched
    assert all(p == 7 for _, p in sched)


def test_equal_weight_split_within_three_sigma():
    r = random.Random(5)
    sched = produce_schedule(2_000_000_000, 0.5, [1, 2], [1.0, 1.0], r)
    n = len(sched)
    ones = sum(1 for _, p in sched if p == 1)
    sigma = math.sqrt(n * 0.25)
    assert abs(ones - n / 2) <= 3 * sigma


def test_times_sorted_and_within_duration():
    sched = produce_schedule(10_000_000, 1.0, [0, 1], [1.0, 2.0], random.Random(3))
    times = [t for t, _ in sched]
    assert times == sorted(times)
    assert all(0 <= t < 10_000_000 for t in times)


def test_rate_must_be_positive():
    with pytest.raises(ValueError):
        produce_schedule(1000, 0.0, [0], [1.0], random.Random(0))


# --- receive outcomes -----------------------------------------------------------------

def test_duplicate_arrival_counted_not_forwarded():
    chain = ChainState()
    b = blk(1)
    assert chain.receive(5, b, 10)[0] == ACCEPT
    outcome, fork, released = chain.receive(5, b, 20)
    assert outcome == DUPLICATE
    assert fork is None and released == []


def test_same_height_conflict_emits_fork_event():
    chain = ChainState()
    b1 = blk(1, height=1)
    b2 = blk(2, height=1)
    chain.receive(5, b1, 10)
    outcome, fork, _ = chain.receive(5, b2, 20)
    assert fork is not None
    assert fork.height == 1
    assert set(fork.block_ids) == {1, 2}
    assert fork.node == 5
    # same conflict at another node is another observation
    chain.receive(6, b1, 30)
    _, fork2, _ = chain.receive(6, b2, 40)
    assert fork2 is not None
    assert len(chain.forks) == 2


def test_orphan_held_until_parent_arrives():
    chain = ChainState()
    parent = blk(1, height=1)
    child = blk(2, height=2, parent=1)
    outcome, _, released = chain.receive(3, child, 10)
    assert outcome == ORPHANED
    assert chain.held_orphans(3) == 1
    outcome, _, released = chain.receive(3, parent, 20)
    assert outcome == ACCEPT
    assert [b.id for b in released] == [2]
    assert chain.held_orphans(3) == 0


def test_orphan_chain_releases_cascade():
    chain = ChainState()
    b1, b2, b3 = blk(1, 1), blk(2, 2, parent=1), blk(3, 3, parent=2)
    chain.receive(0, b3, 1)
    chain.receive(0, b2, 2)
    assert chain.held_orphans(0) == 2
    _, _, released = chain.receive(0, b1, 3)
    assert [b.id for b in released] == [2, 3]
    assert chain.total_held() == 0


def test_producer_tips_advance():
    chain = ChainState()
    b1 = chain.make_block(1, producer=0, size_mb=1.0, tx_count=100, born_us=0)
    assert b1.height == 1 and b1.parent is None
    chain.receive(0, b1, 0)
    b2 = chain.make_block(2, producer=0, size_mb=1.0, tx_count=100, born_us=10)
    assert b2.height == 2 and b2.parent == 1


def test_fork_blocks_counted_at_production():
    chain = ChainState()
    chain.make_block(1, producer=0, size_mb=1.0, tx_count=1, born_us=0)
    # producer 1 has not seen block 1: produces at the same height
    chain.make_block(2, producer=1, size_mb=1.0, tx_count=1, born_us=5)
    assert chain.fork_blocks == 1


# --- throughput -----------------------------------------------------------------------

def test_throughput_no_blocks():
    assert throughput_tps([], {}, 100, 100.0) == 0.0


def test_throughput_arithmetic():
    blocks = [blk(i, height=i, size=0.5) for i in range(1, 11)]
    for b in blocks:
        b.tx_count = 1000
    reach = {b.id: 100 for b in blocks}
    assert throughput_tps(blocks, reach, 100, 100.0) == pytest.approx(100.0)


def test_partially_propagated_block_excluded():
    blocks = [blk(1, size=1.0)]
    blocks[0].tx_count = 1000
    # 90 of 100 nodes < 95% threshold
    assert throughput_tps(blocks, {1: 90}, 100, 10.0) == 0.0
    assert throughput_tps(blocks, {1: 95}, 100, 10.0) == pytest.approx(100.0)


# --- fork rate vs propagation delay (monotone sweep) -------------------------------------

def test_fork_rate_monotone_in_delay():
    """Artificial conflict model: producers fork whenever the previous block
    has not reached them yet; scaling delay up must not reduce fork rate."""
    from blocksdn.config import RunConfig
    from blocksdn.runner import Simulation

    rates = []
    scales = [0.5, 1.0, 2.0, 4.0, 8.0]
    for scale in scales:
        per_seed = []
        for seed in (1, 2, 3):
            cfg = RunConfig(
                n=40, zones=2, seeds=(seed,), warmup_s=2.0, control_period_s=60.0,
                target_cluster_size=10, latency_scale=scale,
                throughput_window_s=60.0, throughput_rate_per_node=0.02,
                block_size_mb=0.5,
            ).resolve()
            sim = Simulation(cfg, "gossip", seed)
            result = sim.run_throughput()
            produced = len(result.blocks)
            if produced:
                per_seed.append(result.chain.fork_blocks / produced)
        rates.append(statistics.mean(per_seed))
    rho, _ = scipy_stats.spearmanr(scales, rates)
    assert rho >= 0, f"fork rate not monotone in delay: {rates}"
