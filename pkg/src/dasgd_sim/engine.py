"""Discrete-event execution of the per-node training protocol, plus the
two baselines used for comparisons (lock-step mini-batch SGD and a
parameter-server emulation).

Each node loops: finish computing a gradient, settle the arrivals that
queued up meanwhile, then evaluate its gradient at the settled parameters,
apply it, and send it out.  Queued updates are therefore always folded in
before a node's own gradient is finalized, which keeps the self-applied
gradient's staleness at zero and matches the protocol's rule that receives
take priority over fresh computation.  Because gradient application
commutes, processing order affects only the staleness bookkeeping, never
the final models.

Everything is deterministic in (config, seed): events are totally ordered
by (time, kind, node, sequence) with deliveries sorting before compute
completions at equal times, and every random draw flows from named
seed streams.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from dasgd_sim.ledger import GradientId, StalenessLedger, StalenessRecord, StalenessSummary
from dasgd_sim.netsim import Network, TimeDistribution, Topology, validate_topology

DELIVER = 0        # sorts before COMPUTE_DONE at equal times
COMPUTE_DONE = 1


class DivergenceError(RuntimeError):
    """Parameters left the finite range; the stepsize is too large."""

    def __init__(self, node: int, step: int, sim_time: float, eta: float):
        super().__init__(
            f"non-finite parameters at node {node}, step {step}, "
            f"sim time {sim_time:.6g} (eta={eta:.6g})"
        )
        self.node = node
        self.step = step
        self.sim_time = sim_time
        self.eta = eta


@dataclass
class SimConfig:
    topology: Topology
    objective: object
    eta: float
    samples_per_node: int
    compute_time: TimeDistribution
    latency: TimeDistribution
    seed: int
    compute_scale: Optional[tuple] = None   # per-node speed multipliers
    start: Optional[np.ndarray] = None      # objective's default when None
    metric_stride: int = 1                  # thin trace rows, not records

    @property
    def n(self) -> int:
        return self.topology.n

    def validate(self) -> None:
        if not (np.isfinite(self.eta) and self.eta > 0):
            raise ValueError("eta must be positive and finite")
        if self.samples_per_node < 1:
            raise ValueError("samples_per_node must be at least 1")
        if self.metric_stride < 1:
            raise ValueError("metric_stride must be at least 1")
        if self.compute_scale is not None:
            if len(self.compute_scale) != self.n:
                raise ValueError("compute_scale length must equal node count")
            if any(not (s > 0 and np.isfinite(s)) for s in self.compute_scale):
                raise ValueError("compute_scale entries must be positive")
        if not (0 <= self.seed < 2**64):
            raise ValueError("seed must fit in 64 bits")
        validate_topology(self.topology)


@dataclass(frozen=True)
class TraceRow:
    t: int
    sim_time: float
    node: int
    loss: float
    grad_norm_sq: float
    tight: int
    loose: int


@dataclass(frozen=True)
class TraceEvent:
    time: float
    kind: str      # compute | apply | send | deliver | duplicate
    node: int
    gid: int


class GradientTable:
    """Dense store of every computed gradient vector, indexed by the same
    ids the ledger kernel assigns."""

    def __init__(self):
        self.producers: list[int] = []
        self.steps: list[int] = []
        self.vectors: list[np.ndarray] = []

    def add(self, producer: int, step: int, vector: np.ndarray) -> int:
        gid = len(self.vectors)
        self.producers.append(producer)
        self.steps.append(step)
        self.vectors.append(vector)
        return gid

    def __len__(self) -> int:
        return len(self.vectors)

    def canonical_order(self, gids) -> list:
        """Ids sorted by (producer, step): the shared summation order that
        makes equal sets reconstruct bit-identical models."""
        return sorted(gids, key=lambda g: (self.producers[g], self.steps[g]))

    def reconstruct(self, x0: np.ndarray, eta: float, gids) -> np.ndarray:
        total = np.zeros_like(x0)
        for g in self.canonical_order(gids):
            total += self.vectors[g]
        return x0 - eta * total


@dataclass
class RunResult:
    mode: str
    config: SimConfig
    start: np.ndarray
    rows: list
    staleness_log: list                      # (sim_time, StalenessRecord)
    events: list
    table: GradientTable
    final_models: np.ndarray                 # one row per model replica
    total_time: float
    gradients_computed: int
    summary: Optional[StalenessSummary]
    ledger: Optional[StalenessLedger] = None
    delay_pairs: Optional[list] = None       # centralized: (delay, set diff)

    @property
    def throughput(self) -> float:
        return self.gradients_computed / self.total_time

    def psi_series(self, node: int) -> list:
        """(t, running average of grad_norm_sq over steps 0..t) for one
        model.  Needs metric_stride=1 to cover every step."""
        rows = sorted(
            (r for r in self.rows if r.node == node), key=lambda r: r.t
        )
        out = []
        acc = 0.0
        for k, row in enumerate(rows):
            acc += row.grad_norm_sq
            out.append((row.t, acc / (k + 1)))
        return out

    def node_rows(self, node: int) -> list:
        return sorted((r for r in self.rows if r.node == node), key=lambda r: r.t)


def gradient_seed(master: int, producer: int, step: int) -> int:
    """Per-gradient noise seed, independent of event interleaving."""
    ss = np.random.SeedSequence([master, producer, step])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _timing_rng(master: int):
    return np.random.default_rng(np.random.SeedSequence([master, 1]))


def run(config: SimConfig) -> RunResult:
    """Execute the decentralized protocol until every budget is spent and
    every gradient has reached and been applied by every node."""
    config.validate()
    n = config.n
    obj = config.objective
    eta = config.eta
    x0 = np.array(
        obj.default_start() if config.start is None else config.start,
        dtype=float,
    )
    scale = tuple(config.compute_scale) if config.compute_scale else (1.0,) * n
    rng_time = _timing_rng(config.seed)
    total_expected = n * config.samples_per_node

    ledger = StalenessLedger(n, expected_gradients=total_expected)
    network = Network(config.topology, config.latency)
    table = GradientTable()
    idents: list[GradientId] = []            # dense gid -> identity
    params = [x0.copy() for _ in range(n)]
    inbox = [deque() for _ in range(n)]
    budget = [config.samples_per_node] * n

    rows: list[TraceRow] = []
    staleness_log: list = []
    events: list[TraceEvent] = []

    heap: list = []
    seq = 0

    def schedule(time, kind, node, payload):
        nonlocal seq
        heapq.heappush(heap, (time, kind, node, seq, payload))
        seq += 1

    def metrics(node, now, t_new, rec):
        if t_new % config.metric_stride and t_new != total_expected:
            return
        try:
            loss = obj.loss(params[node])
            grad = obj.full_gradient(params[node])
            gsq = float(grad @ grad)
        except FloatingPointError:
            raise DivergenceError(node, t_new, now, eta) from None
        if not np.isfinite(gsq):
            raise DivergenceError(node, t_new, now, eta)
        rows.append(
            TraceRow(t_new, now, node, loss, gsq, rec.tight_size, rec.loose_size)
        )

    def apply_one(node, gid, now, arrived_from):
        rec = ledger.record_application(node, idents[gid])
        params[node] -= eta * table.vectors[gid]
        staleness_log.append((now, rec))
        events.append(TraceEvent(now, "apply", node, gid))
        if not np.all(np.isfinite(params[node])):
            raise DivergenceError(node, rec.applier_step + 1, now, eta)
        metrics(node, now, rec.applier_step + 1, rec)
        if arrived_from is not None:
            for msg in network.relay(node, gid, arrived_from, now, rng_time):
                events.append(TraceEvent(now, "send", node, msg.gid))
                schedule(msg.deliver_at, DELIVER, msg.to, msg)

    def on_compute_done(node, now):
        # Arrivals queued during the window are settled first; the fresh
        # gradient is then taken at the settled parameters, so its
        # snapshot matches what it was computed from.
        while inbox[node]:
            gid, sender = inbox[node].popleft()
            apply_one(node, gid, now, sender)
        ident = ledger.record_compute(node)
        vector = obj.stochastic_gradient(
            params[node], gradient_seed(config.seed, node, ident.step)
        )
        gid = table.add(node, ident.step, np.asarray(vector, dtype=float))
        idents.append(ident)
        events.append(TraceEvent(now, "compute", node, gid))
        apply_one(node, gid, now, None)
        for msg in network.disseminate(node, gid, now, rng_time):
            events.append(TraceEvent(now, "send", node, msg.gid))
            schedule(msg.deliver_at, DELIVER, msg.to, msg)
        budget[node] -= 1
        if budget[node] > 0:
            duration = config.compute_time.sample(rng_time) * scale[node]
            schedule(now + duration, COMPUTE_DONE, node, None)

    def on_deliver(node, msg, now):
        status = network.on_receive(node, msg)
        events.append(TraceEvent(now, status if status == "duplicate" else "deliver",
                                 node, msg.gid))
        if status == "duplicate":
            return
        if budget[node] > 0:
            inbox[node].append((msg.gid, msg.sender))
        else:
            # Budget spent: the node is a pure relay/applier now and
            # processes arrivals the moment they land.
            apply_one(node, msg.gid, now, msg.sender)

    for node in range(n):
        rec0 = StalenessRecord(node, 0, node, 0, 0, 0)
        metrics(node, 0.0, 0, rec0)
    # The t=0 rows above reuse the record shape for its zero staleness
    # fields; stride never skips t=0 because 0 % stride == 0.
    for node in range(n):
        duration = config.compute_time.sample(rng_time) * scale[node]
        schedule(duration, COMPUTE_DONE, node, None)

    now = 0.0
    # Overflow is detected explicitly after every application; numpy's
    # own warnings on the way there are noise.
    with np.errstate(over="ignore", invalid="ignore"):
        while heap:
            now, kind, node, _, payload = heapq.heappop(heap)
            if kind == DELIVER:
                on_deliver(node, payload, now)
            else:
                on_compute_done(node, now)

    if ledger.n_gradients != total_expected:
        raise RuntimeError("not every budgeted gradient was computed")
    for node in range(n):
        if ledger.node_step(node) != total_expected:
            raise RuntimeError(f"node {node} missed gradients at termination")

    return RunResult(
        mode="dasgd",
        config=config,
        start=x0,
        rows=rows,
        staleness_log=staleness_log,
        events=events,
        table=table,
        final_models=np.stack(params),
        total_time=now,
        gradients_computed=total_expected,
        summary=ledger.summarize(),
        ledger=ledger,
    )


def run_sync_baseline(config: SimConfig) -> RunResult:
    """Lock-step mini-batch SGD on one shared model.  Every round waits
    for the slowest of the n compute draws, then applies the averaged
    gradient once; idle time lost to stragglers is thereby priced in."""
    config.validate()
    n = config.n
    obj = config.objective
    eta = config.eta
    x0 = np.array(
        obj.default_start() if config.start is None else config.start,
        dtype=float,
    )
    scale = tuple(config.compute_scale) if config.compute_scale else (1.0,) * n
    rng_time = _timing_rng(config.seed)
    rounds = config.samples_per_node

    ledger = StalenessLedger(1, expected_gradients=rounds)
    table = GradientTable()
    x = x0.copy()
    now = 0.0
    rows: list[TraceRow] = []
    staleness_log: list = []

    def metrics(t_new, rec):
        if t_new % config.metric_stride and t_new != rounds:
            return
        try:
            loss = obj.loss(x)
            grad = obj.full_gradient(x)
            gsq = float(grad @ grad)
        except FloatingPointError:
            raise DivergenceError(0, t_new, now, eta) from None
        if not np.isfinite(gsq):
            raise DivergenceError(0, t_new, now, eta)
        rows.append(TraceRow(t_new, now, 0, loss, gsq, rec.tight_size, rec.loose_size))

    metrics(0, StalenessRecord(0, 0, 0, 0, 0, 0))
    with np.errstate(over="ignore", invalid="ignore"):
        for r in range(rounds):
            durations = [
                config.compute_time.sample(rng_time) * scale[i]
                for i in range(n)
            ]
            grads = np.stack([
                obj.stochastic_gradient(x, gradient_seed(config.seed, i, r))
                for i in range(n)
            ])
            now += max(durations)
            averaged = grads.mean(axis=0)
            ident = ledger.record_compute(0)
            gid = table.add(0, ident.step, averaged)
            rec = ledger.record_application(0, ident)
            x -= eta * averaged
            if not np.all(np.isfinite(x)):
                raise DivergenceError(0, r + 1, now, eta)
            staleness_log.append((now, rec))
            metrics(r + 1, rec)

    return RunResult(
        mode="sync",
        config=config,
        start=x0,
        rows=rows,
        staleness_log=staleness_log,
        events=[],
        table=table,
        final_models=x[np.newaxis, :],
        total_time=now,
        gradients_computed=n * rounds,
        summary=ledger.summarize(),
        ledger=ledger,
    )


def run_centralized_asgd(config: SimConfig) -> RunResult:
    """Parameter-server emulation: workers fetch the server model, compute
    for a sampled duration, and push; the server applies pushes in arrival
    order and the worker refetches immediately after its push lands.

    Per application the classic delay (server updates since the worker's
    fetch) is recorded alongside the size of the set difference between
    the server's applied set and the worker's fetched set, through two
    independent code paths: a counter subtraction and an actual symmetric
    difference of identity sets.
    """
    config.validate()
    n = config.n
    obj = config.objective
    eta = config.eta
    x0 = np.array(
        obj.default_start() if config.start is None else config.start,
        dtype=float,
    )
    scale = tuple(config.compute_scale) if config.compute_scale else (1.0,) * n
    rng_time = _timing_rng(config.seed)

    table = GradientTable()
    server = x0.copy()
    server_set: set = set()
    update_count = 0

    fetched_params = [x0.copy() for _ in range(n)]
    fetched_set = [frozenset() for _ in range(n)]
    fetched_count = [0] * n
    pushes_done = [0] * n

    rows: list[TraceRow] = []
    staleness_log: list = []
    delay_pairs: list = []
    heap: list = []
    seq = 0

    def push_arrival(worker, start_time):
        nonlocal seq
        duration = config.compute_time.sample(rng_time) * scale[worker]
        delay = config.latency.sample(rng_time)
        heapq.heappush(heap, (start_time + duration + delay, seq, worker))
        seq += 1

    def metrics(t_new, now, rec):
        if t_new % config.metric_stride and t_new != n * config.samples_per_node:
            return
        try:
            loss = obj.loss(server)
            grad = obj.full_gradient(server)
            gsq = float(grad @ grad)
        except FloatingPointError:
            raise DivergenceError(-1, t_new, now, eta) from None
        if not np.isfinite(gsq):
            raise DivergenceError(-1, t_new, now, eta)
        rows.append(
            TraceRow(t_new, now, rec.producer, loss, gsq,
                     rec.tight_size, rec.loose_size)
        )

    metrics(0, 0.0, StalenessRecord(-1, 0, 0, 0, 0, 0))
    for worker in range(n):
        push_arrival(worker, 0.0)

    now = 0.0
    tight_sum = 0
    tight_max = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while heap:
            now, _, worker = heapq.heappop(heap)
            step = pushes_done[worker]
            vector = obj.stochastic_gradient(
                fetched_params[worker], gradient_seed(config.seed, worker, step)
            )
            ident = GradientId(worker, step)
            # Route one: pure counter arithmetic.
            delay = update_count - fetched_count[worker]
            # Route two: the actual sets.
            diff = len(server_set ^ fetched_set[worker])
            delay_pairs.append((delay, diff))
            server -= eta * np.asarray(vector, dtype=float)
            if not np.all(np.isfinite(server)):
                raise DivergenceError(-1, update_count + 1, now, eta)
            table.add(worker, step, np.asarray(vector, dtype=float))
            server_set.add(ident)
            update_count += 1
            rec = StalenessRecord(
                applier=-1,
                applier_step=update_count - 1,
                producer=worker,
                producer_step=step,
                tight_size=diff,
                loose_size=diff,
            )
            staleness_log.append((now, rec))
            tight_sum += diff
            tight_max = max(tight_max, diff)
            metrics(update_count, now, rec)
            pushes_done[worker] = step + 1
            fetched_params[worker] = server.copy()
            fetched_set[worker] = frozenset(server_set)
            fetched_count[worker] = update_count
            if pushes_done[worker] < config.samples_per_node:
                push_arrival(worker, now)

    n_events = len(staleness_log)
    summary = StalenessSummary(
        tight_avg=tight_sum / n_events if n_events else 0.0,
        tight_max=tight_max,
        loose_avg=tight_sum / n_events if n_events else 0.0,
        loose_max=tight_max,
        n_events=n_events,
        n_foreign=n_events,
    )
    return RunResult(
        mode="centralized_asgd",
        config=config,
        start=x0,
        rows=rows,
        staleness_log=staleness_log,
        events=[],
        table=table,
        final_models=server[np.newaxis, :],
        total_time=now,
        gradients_computed=update_count,
        summary=summary,
        delay_pairs=delay_pairs,
    )
