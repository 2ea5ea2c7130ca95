"""Incremental gradient-set bookkeeping, pure Python reference kernel.

Gradients get dense integer ids in creation order.  Per-node membership
sets are plain Python ints used as bitmasks: snapshotting a node's set at
gradient creation is a reference copy (ints are immutable), and the set
algebra per application event is a handful of word operations.  The
compiled kernel in _staleness_core mirrors this API exactly.
"""

from __future__ import annotations


class StalenessKernel:
    """Tracks which gradient ids each node has applied and measures, per
    application event, the drift between applier and producer.

    The tight measure is the size of the symmetric difference between the
    applier's current set and the snapshot the gradient was created from.
    The loose measure additionally chases every gradient of the snapshot
    that the applier has not seen into that gradient's own snapshot, to a
    fixed point, and counts the union of all the differences.
    """

    def __init__(self, n_nodes: int, expected_gradients: int = 0):
        if n_nodes < 1:
            raise ValueError("need at least one node")
        self._members = [0] * n_nodes
        self._snapshots: list[int] = []  # gid -> producer's set at creation
        self._producers: list[int] = []

    @property
    def n_nodes(self) -> int:
        return len(self._members)

    @property
    def n_gradients(self) -> int:
        return len(self._snapshots)

    def register_gradient(self, producer: int) -> int:
        """Mint the id for a gradient `producer` just finished computing.

        The producer's current set becomes the gradient's snapshot; the
        gradient itself is never part of its own snapshot.
        """
        gid = len(self._snapshots)
        self._snapshots.append(self._members[producer])
        self._producers.append(producer)
        return gid

    def apply_gradient(self, node: int, gid: int) -> tuple[int, int]:
        """Add gid to node's set; return (tight, loose) sizes measured
        against the node's set from before the insertion."""
        members = self._members[node]
        bit = 1 << gid
        if members & bit:
            raise ValueError(f"gradient {gid} already applied by node {node}")
        snap = self._snapshots[gid]
        tight = (members ^ snap).bit_count()
        loose = self._loose_size(members, snap)
        self._members[node] = members | bit
        return tight, loose

    def _loose_size(self, members: int, snap: int) -> int:
        result = members ^ snap
        frontier = snap & ~members
        seen = frontier
        while frontier:
            low = frontier & -frontier
            frontier ^= low
            g_snap = self._snapshots[low.bit_length() - 1]
            result |= members ^ g_snap
            fresh = g_snap & ~members & ~seen
            seen |= fresh
            frontier |= fresh
        return result.bit_count()

    def producer_of(self, gid: int) -> int:
        return self._producers[gid]

    def node_size(self, node: int) -> int:
        return self._members[node].bit_count()

    def node_contains(self, node: int, gid: int) -> bool:
        return bool(self._members[node] >> gid & 1)

    def node_members(self, node: int) -> frozenset[int]:
        return _bits_to_ids(self._members[node])

    def snapshot_members(self, gid: int) -> frozenset[int]:
        return _bits_to_ids(self._snapshots[gid])


def _bits_to_ids(mask: int) -> frozenset[int]:
    out = []
    while mask:
        low = mask & -mask
        mask ^= low
        out.append(low.bit_length() - 1)
    return frozenset(out)
