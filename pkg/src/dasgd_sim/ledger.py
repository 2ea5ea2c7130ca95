"""Gradient identity bookkeeping and staleness measurement.

Every node carries the set of gradient identities it has applied since the
shared starting point.  With a fixed stepsize that set determines the model
exactly, so set differences are a faithful measure of how far two models
have drifted apart.  This module tracks the sets incrementally through a
bitset kernel, computes the tight and loose difference sizes for every
application event, and aggregates the run-level summary.

Two notions of drift are recorded per event.  The tight size counts the
symmetric difference between the applier's current set and the snapshot
the incoming gradient was computed from.  The loose size enlarges that
recursively: every gradient of the snapshot the applier has not seen drags
in the difference against its own creation snapshot, chased to a fixed
point.  Loose is never smaller than tight.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import IO, Iterable, Iterator, Mapping, Union

from dasgd_sim._kernel import StalenessKernel


@dataclass(frozen=True, order=True)
class GradientId:
    """Identity of one computed gradient.

    `step` is the producer's local step counter at computation time, which
    equals the size of the producer's applied set at that moment.  Pairs
    are unique within a run: a node applies its own gradient before it can
    finish another one, so its set grows between computations.
    """

    producer: int
    step: int


@dataclass(frozen=True)
class StalenessRecord:
    """One application event.  `applier_step` is the applier's step count
    before the gradient was added (the application itself advances it)."""

    applier: int
    applier_step: int
    producer: int
    producer_step: int
    tight_size: int
    loose_size: int

    @property
    def gradient(self) -> GradientId:
        return GradientId(self.producer, self.producer_step)

    @property
    def is_self(self) -> bool:
        return self.applier == self.producer


@dataclass(frozen=True)
class StalenessSummary:
    tight_avg: float
    tight_max: int
    loose_avg: float
    loose_max: int
    n_events: int        # all recorded applications
    n_foreign: int       # applications of gradients produced elsewhere


def tight_staleness(first: frozenset, second: frozenset) -> frozenset:
    """Symmetric difference between two applied-gradient sets."""
    return frozenset(first ^ second)


def loose_staleness(
    snapshots: Mapping[GradientId, frozenset],
    applied: frozenset,
    producer_set: frozenset,
) -> frozenset:
    """Least fixed point of the recursive enlargement.

    Beyond the plain symmetric difference, every gradient in
    `producer_set` that the applier has not seen contributes the
    difference between `applied` and that gradient's own snapshot, and the
    unseen gradients of those snapshots recurse in turn.  Each gradient is
    expanded once; snapshots only reference earlier gradients, so the walk
    terminates.
    """
    result = set(applied ^ producer_set)
    frontier = list(producer_set - applied)
    seen = set(frontier)
    while frontier:
        gid = frontier.pop()
        try:
            snap = snapshots[gid]
        except KeyError:
            raise ValueError(f"no snapshot recorded for {gid}") from None
        result |= applied ^ snap
        for g in snap - applied:
            if g not in seen:
                seen.add(g)
                frontier.append(g)
    return frozenset(result)


class StalenessLedger:
    """Single-writer record of every computation and application event.

    The simulation loop owns the ledger and mutates it sequentially;
    summaries and records handed out are immutable.
    """

    def __init__(self, n_nodes: int, expected_gradients: int = 0):
        self._kernel = StalenessKernel(n_nodes, expected_gradients)
        self._ids: list[GradientId] = []          # dense gid -> identity
        self._gids: dict[GradientId, int] = {}
        self._records: list[StalenessRecord] = []
        self._events: list[Union[GradientId, StalenessRecord]] = []

    @property
    def n_nodes(self) -> int:
        return self._kernel.n_nodes

    @property
    def n_gradients(self) -> int:
        return self._kernel.n_gradients

    @property
    def records(self) -> list[StalenessRecord]:
        return list(self._records)

    def record_compute(self, producer: int) -> GradientId:
        """Register a gradient the producer just finished computing.  Its
        snapshot is the producer's current applied set."""
        ident = GradientId(producer, self._kernel.node_size(producer))
        if ident in self._gids:
            raise ValueError(
                f"{ident} already registered; a node must apply its own "
                f"gradient before computing the next one"
            )
        gid = self._kernel.register_gradient(producer)
        self._ids.append(ident)
        self._gids[ident] = gid
        self._events.append(ident)
        return ident

    def record_application(self, applier: int, gradient: GradientId) -> StalenessRecord:
        """Apply `gradient` to `applier`'s set and record the event.

        Staleness is measured against the applier's set before insertion.
        Applying an unknown gradient or the same gradient twice is a
        protocol violation and raises.
        """
        gid = self._gids.get(gradient)
        if gid is None:
            raise ValueError(f"{gradient} was never computed")
        applier_step = self._kernel.node_size(applier)
        tight, loose = self._kernel.apply_gradient(applier, gid)
        record = StalenessRecord(
            applier=applier,
            applier_step=applier_step,
            producer=gradient.producer,
            producer_step=gradient.step,
            tight_size=tight,
            loose_size=loose,
        )
        self._records.append(record)
        self._events.append(record)
        return record

    def applied_set(self, node: int) -> frozenset:
        return frozenset(self._ids[g] for g in self._kernel.node_members(node))

    def snapshot(self, gradient: GradientId) -> frozenset:
        gid = self._gids.get(gradient)
        if gid is None:
            raise ValueError(f"{gradient} was never computed")
        return frozenset(self._ids[g] for g in self._kernel.snapshot_members(gid))

    def snapshots(self) -> dict[GradientId, frozenset]:
        """All creation snapshots, keyed by gradient identity."""
        return {ident: self.snapshot(ident) for ident in self._ids}

    def contains(self, node: int, gradient: GradientId) -> bool:
        gid = self._gids.get(gradient)
        return gid is not None and self._kernel.node_contains(node, gid)

    def node_step(self, node: int) -> int:
        return self._kernel.node_size(node)

    def summarize(self) -> StalenessSummary:
        """Aggregate the per-event records.

        Averages are taken per node over applications of gradients
        produced elsewhere, then the worst node is reported.
        Self-applications always measure zero and say nothing about drift
        between distinct models, so they dilute the average and are left
        out of it; they still participate in the maxima and the event
        count.  A node that only ever applied its own gradients averages
        zero.
        """
        if not self._records:
            raise ValueError("no applications recorded")
        n = self.n_nodes
        tight_sum = [0] * n
        loose_sum = [0] * n
        foreign = [0] * n
        tight_max = 0
        loose_max = 0
        n_foreign = 0
        for rec in self._records:
            tight_max = max(tight_max, rec.tight_size)
            loose_max = max(loose_max, rec.loose_size)
            if rec.is_self:
                continue
            tight_sum[rec.applier] += rec.tight_size
            loose_sum[rec.applier] += rec.loose_size
            foreign[rec.applier] += 1
            n_foreign += 1
        tight_avg = max(
            tight_sum[i] / foreign[i] if foreign[i] else 0.0 for i in range(n)
        )
        loose_avg = max(
            loose_sum[i] / foreign[i] if foreign[i] else 0.0 for i in range(n)
        )
        return StalenessSummary(
            tight_avg=tight_avg,
            tight_max=tight_max,
            loose_avg=loose_avg,
            loose_max=loose_max,
            n_events=len(self._records),
            n_foreign=n_foreign,
        )

    # Event-log export/import.  Line format:
    #   COMPUTE node step
    #   APPLY node step producer pstep
    # with steps validated on replay.

    def export_events(self, stream: IO[str]) -> None:
        for ev in self._events:
            if isinstance(ev, GradientId):
                stream.write(f"COMPUTE {ev.producer} {ev.step}\n")
            else:
                stream.write(
                    f"APPLY {ev.applier} {ev.applier_step} "
                    f"{ev.producer} {ev.producer_step}\n"
                )

    @classmethod
    def replay(cls, lines: Iterable[str], n_nodes: int = None) -> "StalenessLedger":
        """Rebuild a ledger from an exported event log, validating every
        step counter against the reconstructed state."""
        events = list(parse_event_log(lines))
        if n_nodes is None:
            n_nodes = 1 + max((ev[1] for _, ev in events), default=0)
        ledger = cls(n_nodes)
        for line_no, ev in events:
            try:
                if ev[0] == "compute":
                    _, node, step = ev
                    if step != ledger.node_step(node):
                        raise ValueError(
                            f"COMPUTE step {step} does not match node "
                            f"{node} at step {ledger.node_step(node)}"
                        )
                    ledger.record_compute(node)
                else:
                    _, node, step, producer, pstep = ev
                    if step != ledger.node_step(node):
                        raise ValueError(
                            f"APPLY step {step} does not match node "
                            f"{node} at step {ledger.node_step(node)}"
                        )
                    ledger.record_application(node, GradientId(producer, pstep))
            except (ValueError, IndexError) as exc:
                raise EventLogError(line_no, str(exc)) from None
        return ledger


class EventLogError(ValueError):
    """Malformed or protocol-violating event log line."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def parse_event_log(lines: Iterable[str]) -> Iterator[tuple]:
    """Yield (line_no, event) pairs where event is ("compute", node, step)
    or ("apply", node, step, producer, pstep).  Blank lines and #-comments
    are skipped."""
    for line_no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "COMPUTE" and len(parts) == 3:
                yield line_no, ("compute", int(parts[1]), int(parts[2]))
            elif parts[0] == "APPLY" and len(parts) == 5:
                yield line_no, (
                    "apply",
                    int(parts[1]),
                    int(parts[2]),
                    int(parts[3]),
                    int(parts[4]),
                )
            else:
                raise ValueError("unrecognized event")
        except (ValueError, IndexError):
            raise EventLogError(line_no, f"malformed line: {raw.rstrip()}") from None
