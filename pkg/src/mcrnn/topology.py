"""Staggered block schedule for the multi-channel layer.

A layer with block size ``n`` runs ``K = n - 1`` parallel channels over the
same cell. Within a channel, nodes are grouped into blocks of ``n`` steps that
share their boundary node, and every node connects to all of its in-block
predecessors. Neighboring channels are staggered by one step, so at any step
the in-degrees across channels cover {1, ..., n-1} exactly. Steps <= 0 refer
to the padded zero state.

This module is pure arithmetic on step indices; it also measures shortest
gradient paths over the induced DAG by breadth-first search.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass


@dataclass(frozen=True)
class Topology:
    """Block size ``n`` (>= 2); channels are indexed 1..K with K = n - 1."""

    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"block size must be >= 2, got {self.n}")

    @property
    def channels(self) -> int:
        return self.n - 1


@dataclass(frozen=True)
class Predecessors:
    """Steps t-1, t-2, ..., t-m feeding a node; entries <= 0 are zero-padded."""

    steps: tuple[int, ...]

    @property
    def m(self) -> int:
        return len(self.steps)


def _check_args(topo: Topology, k: int, t: int) -> None:
    if not 1 <= k <= topo.channels:
        raise ValueError(f"channel index k={k} out of range 1..{topo.channels}")
    if t < 1:
        raise ValueError(f"step index t={t} must be >= 1")


def in_degree(topo: Topology, k: int, t: int) -> int:
    """Number of predecessors of node (t, k).

    Uses the non-negative modulo throughout: t - k - 1 can be negative at the
    start of a channel and the result must still land in 1..n-1.
    """
    _check_args(topo, k, t)
    return (t - k - 1) % (topo.n - 1) + 1


def predecessors(topo: Topology, k: int, t: int) -> Predecessors:
    """Steps feeding node (t, k), newest first; steps <= 0 mean the zero state.

    The zero-padded entries are kept in-band so the 1/m mean over the block
    keeps exactly m summands even when some are zero vectors.
    """
    m = in_degree(topo, k, t)
    return Predecessors(steps=tuple(t - j for j in range(1, m + 1)))


def degree_profile(topo: Topology, t: int) -> set[int]:
    """Set of in-degrees across all channels at step t."""
    return {in_degree(topo, k, t) for k in range(1, topo.channels + 1)}


def shortest_path(topo: Topology, k: int, i: int, l: int) -> int:
    """Edge count of the shortest path from node i to node i + l in channel k.

    BFS over the directed edges (t - j) -> t for j = 1..in_degree(k, t).
    Within a single channel this can exceed floor(l / (n - 1)) + 1 by one
    edge when i is not aligned with the channel's block boundaries; the
    bound proper holds across channels, see layer_shortest_path.
    """
    if i < 1 or l < 1:
        raise ValueError(f"need source step i >= 1 and offset l >= 1, got i={i}, l={l}")
    target = i + l
    dist = {i: 0}
    queue = deque([i])
    while queue:
        u = queue.popleft()
        if u == target:
            return dist[u]
        # successors of u: nodes v in (u, u + n - 1] whose predecessor window reaches u
        for v in range(u + 1, min(u + topo.n - 1, target) + 1):
            if v - u <= in_degree(topo, k, v) and v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    raise AssertionError("target unreachable; the t-1 chain should always connect")


def layer_shortest_path(topo: Topology, i: int, l: int) -> int:
    """Shortest gradient path from step i to step i + l across the layer.

    The loss at a step reads every channel (attention) and every channel
    reads the step input, so credit between two steps flows through
    whichever channel gives the shortest route. Because neighboring
    channels are staggered by one step, every step is a block boundary
    of some channel, and the minimum obeys floor(l / (n - 1)) + 1.
    """
    return min(shortest_path(topo, k, i, l) for k in range(1, topo.channels + 1))


def path_bound(topo: Topology, l: int) -> int:
    """Upper bound floor(l / (n - 1)) + 1 on the layer shortest-path length."""
    return l // (topo.n - 1) + 1


def block_partition(topo: Topology, k: int, T: int) -> list[tuple[int, int]]:
    """Step intervals of the channel's blocks, clipped to 1..T at the tail.

    Blocks are joined head-to-end: each interval shares its boundary step with
    the next. The first block of channel k starts at step 2 - k, which is <= 0
    for k >= 2 and covers the zero-padded lead-in. For visualization/export.
    """
    if T < 1:
        raise ValueError(f"sequence length T={T} must be >= 1")
    _check_args(topo, k, 1)
    out = []
    start = 2 - k
    while start < T:
        out.append((start, min(start + topo.n - 1, T)))
        start += topo.n - 1
    return out


def dump(topo: Topology, T: int) -> str:
    """One line per (channel, step) with in-degree and predecessor steps."""
    lines = [f"block_size n={topo.n} channels K={topo.channels}"]
    for k in range(1, topo.channels + 1):
        blocks = " ".join(f"[{a},{b}]" for a, b in block_partition(topo, k, T))
        lines.append(f"channel {k} blocks: {blocks}")
        for t in range(1, T + 1):
            preds = predecessors(topo, k, t)
            steps = ",".join(str(s) for s in preds.steps)
            lines.append(f"k={k} t={t} m={preds.m} preds={steps}")
    return "\n".join(lines) + "\n"
