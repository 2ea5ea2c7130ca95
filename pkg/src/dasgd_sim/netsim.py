"""Communication substrate: topology graphs, seeded delay distributions,
and gradient dissemination with receiver-side duplicate suppression.

Dissemination is flooding with store-and-forward relaying: an accepted
gradient is forwarded when the receiving node processes it, not at the
delivery instant, so propagation across multi-hop topologies costs
compute-boundary hops.  On the ring, copies travel in one direction
around the cycle; relaying a gradient both ways would make every node two
hops from every other and erase the topology's staleness signature.
Duplicate suppression is authoritative at delivery time either way: each
node accepts a given gradient exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class TopologyError(ValueError):
    pass


class Topology:
    """Undirected connected graph over nodes 0..n-1.

    `kind` selects the relay policy: fully connected and custom graphs
    flood to every neighbor except the arrival edge; rings forward along
    the cycle only.
    """

    def __init__(self, kind: str, n: int, edges):
        if n < 1:
            raise TopologyError("need at least one node")
        seen = set()
        for a, b in edges:
            if not (0 <= a < n and 0 <= b < n):
                raise TopologyError(f"edge ({a},{b}) out of range for n={n}")
            if a == b:
                raise TopologyError(f"self-loop at node {a}")
            key = (min(a, b), max(a, b))
            if key in seen:
                raise TopologyError(f"duplicate edge ({key[0]},{key[1]})")
            seen.add(key)
        self.kind = kind
        self.n = n
        self.edges = frozenset(seen)
        adjacency = [[] for _ in range(n)]
        for a, b in sorted(self.edges):
            adjacency[a].append(b)
            adjacency[b].append(a)
        self._adjacency = [tuple(sorted(nbrs)) for nbrs in adjacency]

    @classmethod
    def fully_connected(cls, n: int) -> "Topology":
        edges = [(a, b) for a in range(n) for b in range(a + 1, n)]
        return cls("fully_connected", n, edges)

    @classmethod
    def ring(cls, n: int) -> "Topology":
        if n == 1:
            return cls("ring", 1, [])
        if n == 2:
            # The wrap edge coincides with the forward edge.
            return cls("ring", 2, [(0, 1)])
        edges = {(i, (i + 1) % n) for i in range(n)}
        return cls("ring", n, edges)

    @classmethod
    def custom(cls, n: int, edges) -> "Topology":
        return cls("custom", n, edges)

    def neighbors(self, node: int) -> tuple:
        return self._adjacency[node]

    def route_targets(self, node: int, arrived_from: int = None) -> tuple:
        """Where copies of a gradient leaving `node` go.  `arrived_from`
        is None when the node is the producer."""
        if self.kind == "ring" and self.n > 1:
            forward = (node + 1) % self.n
            return () if forward == arrived_from else (forward,)
        return tuple(m for m in self._adjacency[node] if m != arrived_from)

    def __eq__(self, other):
        return (isinstance(other, Topology)
                and (self.kind, self.n, self.edges)
                == (other.kind, other.n, other.edges))

    def __hash__(self):
        return hash((self.kind, self.n, self.edges))

    def __repr__(self):
        return f"Topology({self.kind!r}, n={self.n}, edges={len(self.edges)})"


def validate_topology(topology: Topology) -> None:
    """Raise TopologyError unless the graph is connected (self-loops and
    duplicates are already rejected at construction)."""
    n = topology.n
    reached = {0}
    frontier = [0]
    while frontier:
        node = frontier.pop()
        for m in topology.neighbors(node):
            if m not in reached:
                reached.add(m)
                frontier.append(m)
    if len(reached) < n:
        inside = min(reached)
        outside = min(set(range(n)) - reached)
        raise TopologyError(
            f"graph is not connected: no path between node {inside} and "
            f"node {outside} (component {sorted(reached)} vs the rest)"
        )


@dataclass(frozen=True)
class TimeDistribution:
    """Positive delay distribution for latencies and compute times."""

    kind: str            # constant | uniform | exponential
    low: float = 0.0     # constant value, uniform lower, or exponential mean
    high: float = 0.0    # uniform upper; unused otherwise

    @classmethod
    def constant(cls, value: float) -> "TimeDistribution":
        if not (value > 0 and np.isfinite(value)):
            raise ValueError("constant delay must be positive and finite")
        return cls("constant", value)

    @classmethod
    def uniform(cls, low: float, high: float) -> "TimeDistribution":
        if not (0 < low <= high and np.isfinite(high)):
            raise ValueError("need 0 < low <= high")
        return cls("uniform", low, high)

    @classmethod
    def exponential(cls, mean: float) -> "TimeDistribution":
        if not (mean > 0 and np.isfinite(mean)):
            raise ValueError("exponential mean must be positive and finite")
        return cls("exponential", mean)

    @property
    def mean(self) -> float:
        if self.kind == "uniform":
            return 0.5 * (self.low + self.high)
        return self.low

    def sample(self, rng) -> float:
        if self.kind == "constant":
            return self.low
        if self.kind == "uniform":
            return float(rng.uniform(self.low, self.high))
        value = float(rng.exponential(self.low))
        while value <= 0.0:  # delays are strictly positive
            value = float(rng.exponential(self.low))
        return value


@dataclass(frozen=True)
class InFlightMessage:
    gid: int             # dense gradient id
    sender: int
    to: int
    deliver_at: float
    seq: int             # creation order, for deterministic tie-breaks


class Network:
    """Message creation and duplicate suppression for one run.  The event
    scheduler owns delivery timing; this class decides who gets copies and
    which arrivals are new."""

    def __init__(self, topology: Topology, latency: TimeDistribution):
        self.topology = topology
        self.latency = latency
        self._seen = [set() for _ in range(topology.n)]
        self._next_seq = 0
        self.sent_count = 0
        self.duplicate_count = 0

    def _make_messages(self, node, gid, targets, now, rng):
        out = []
        for to in targets:
            delay = self.latency.sample(rng)
            out.append(InFlightMessage(gid, node, to, now + delay, self._next_seq))
            self._next_seq += 1
        self.sent_count += len(out)
        return out

    def mark_seen(self, node: int, gid: int) -> None:
        self._seen[node].add(gid)

    def has_seen(self, node: int, gid: int) -> bool:
        return gid in self._seen[node]

    def disseminate(self, origin: int, gid: int, now: float, rng) -> list:
        """Messages for a gradient the origin just produced (the origin
        itself counts as having seen it)."""
        self._seen[origin].add(gid)
        targets = self.topology.route_targets(origin, arrived_from=None)
        return self._make_messages(origin, gid, targets, now, rng)

    def on_receive(self, node: int, message: InFlightMessage) -> str:
        """Mark the arrival; "accept" exactly once per (node, gradient)."""
        if message.gid in self._seen[node]:
            self.duplicate_count += 1
            return "duplicate"
        self._seen[node].add(message.gid)
        return "accept"

    def relay(self, node: int, gid: int, arrived_from: int, now: float, rng) -> list:
        """Forward copies of an accepted gradient; called when the node
        processes it."""
        targets = self.topology.route_targets(node, arrived_from)
        return self._make_messages(node, gid, targets, now, rng)
