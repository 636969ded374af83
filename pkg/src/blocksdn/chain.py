"""Minimal chain semantics: block production, validation delay, fork
detection, orphan buffering, and throughput accounting. Forks are counted
as a synchronization-health signal, never resolved.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional

ACCEPT = "accept"
DUPLICATE = "duplicate"
ORPHANED = "orphan"


@dataclass(slots=True)
class Block:
    id: int
    height: int
    parent: Optional[int]
    size_mb: float
    tx_count: int
    producer: int
    born_us: int


@dataclass(slots=True)
class ForkEvent:
    node: int
    height: int
    block_ids: tuple[int, int]
    at_us: int


def validation_delay_us(size_mb: float, compute: float, base_ms_per_mb: float = 50.0) -> int:
    """Validation takes base * size, scaled down by node compute."""
    return round(base_ms_per_mb * size_mb / compute * 1000.0)


def produce_schedule(duration_us: int, rate_per_s: float, producers: list[int],
                     weights: list[float], rng: random.Random) -> list[tuple[int, int]]:
    """Poisson block production: exponential gaps, producers drawn by weight."""
    if rate_per_s <= 0:
        raise ValueError("production rate must be positive")
    out = []
    t = 0.0
    rate_per_us = rate_per_s / 1_000_000.0
    while True:
        t += rng.expovariate(rate_per_us)
        if t >= duration_us:
            break
        out.append((round(t), rng.choices(producers, weights=weights, k=1)[0]))
    return out


class ChainState:
    """Per-node chain bookkeeping for one run."""

    def __init__(self):
        self.blocks: dict[int, Block] = {}
        self._seen: dict[int, set[int]] = {}
        self._height_first: dict[int, dict[int, int]] = {}
        self._tip: dict[int, tuple[int, Optional[int]]] = {}
        self._orphans: dict[int, dict[int, list[Block]]] = {}
        self.forks: list[ForkEvent] = []
        self.produced_heights: dict[int, int] = {}  # height -> first block id
        self.fork_blocks: int = 0                   # produced blocks that conflicted

    def _node(self, node: int) -> set[int]:
        seen = self._seen.get(node)
        if seen is None:
            seen = set()
            self._seen[node] = seen
            self._height_first[node] = {}
            self._orphans[node] = {}
        return seen

    def tip(self, node: int) -> tuple[int, Optional[int]]:
        return self._tip.get(node, (0, None))

    def make_block(self, block_id: int, producer: int, size_mb: float,
                   tx_count: int, born_us: int) -> Block:
        height, parent = self.tip(producer)
        block = Block(block_id, height + 1, parent, size_mb, tx_count, producer, born_us)
        self.blocks[block_id] = block
        first = self.produced_heights.get(block.height)
        if first is None:
            self.produced_heights[block.height] = block_id
        else:
            self.fork_blocks += 1
        return block

    def receive(self, node: int, block: Block, at_us: int,
                ) -> tuple[str, Optional[ForkEvent], list[Block]]:
        """Process a block at a node.

        Returns (outcome, fork event or None, released orphans). A block with
        an unseen parent is held until the parent shows up; releases cascade.
        """
        seen = self._node(node)
        if block.id in seen:
            return DUPLICATE, None, []
        seen.add(block.id)
        fork = None
        heights = self._height_first[node]
        prev = heights.get(block.height)
        if prev is None:
            heights[block.height] = block.id
        elif prev != block.id:
            fork = ForkEvent(node, block.height, (prev, block.id), at_us)
            self.forks.append(fork)
        if block.parent is not None and block.parent not in seen:
            self._orphans[node].setdefault(block.parent, []).append(block)
            return ORPHANED, fork, []
        self._advance_tip(node, block)
        released = self._release(node, block.id)
        return ACCEPT, fork, released

    def _advance_tip(self, node: int, block: Block) -> None:
        height, _ = self.tip(node)
        if block.height > height:
            self._tip[node] = (block.height, block.id)

    def _release(self, node: int, parent_id: int) -> list[Block]:
        out: list[Block] = []
        queue = [parent_id]
        orphans = self._orphans[node]
        while queue:
            pid = queue.pop()
            for child in orphans.pop(pid, []):
                self._advance_tip(node, child)
                out.append(child)
                queue.append(child.id)
        return out

    def held_orphans(self, node: int) -> int:
        return sum(len(v) for v in self._orphans.get(node, {}).values())

    def total_held(self) -> int:
        return sum(len(v) for per in self._orphans.values() for v in per.values())


def throughput_tps(blocks: list[Block], reach: dict[int, int], n_online: int,
                   duration_s: float, threshold: float = 0.95) -> float:
    """Transactions per second from blocks that reached the propagation
    threshold; partially propagated blocks earn nothing."""
    if duration_s <= 0:
        return 0.0
    need = threshold * n_online
    tx = sum(b.tx_count for b in blocks if reach.get(b.id, 0) >= need)
    return tx / duration_s
