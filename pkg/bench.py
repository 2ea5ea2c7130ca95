#!/usr/bin/env python3
"""Staleness kernel benchmark: compiled extension vs pure Python.

The kernel is the per-application hot path (set insertion plus two
staleness counts per applied gradient), so it is timed on a real
protocol schedule: a short simulation is run first, its event log is
flattened into (register | apply) operations, and the same operation
stream is replayed through both kernel implementations.

    python3 bench.py
    python3 bench.py --nodes 8 --budget 300 --topology ring --repeats 7
    python3 bench.py --end-to-end

--end-to-end times whole simulator runs in subprocesses instead
(DASGD_SIM_PURE=1 forces the fallback there), which includes event-queue
and numeric work and so shows a smaller, more honest ratio.
"""

import argparse
import io
import os
import subprocess
import sys
import time

from dasgd_sim.config import ExperimentConfig
from dasgd_sim.engine import run
from dasgd_sim.ledger import parse_event_log
from dasgd_sim._staleness_pure import StalenessKernel as PureKernel

try:
    from dasgd_sim._staleness_core import StalenessKernel as CompiledKernel
except ImportError:
    CompiledKernel = None


def protocol_schedule(nodes, budget, topology):
    """Flatten one run's event log into kernel operations.

    Returns (n_nodes, ops) where ops are ("reg", producer) or
    ("app", node, gid) with gids in registration order, matching what
    the ledger feeds the kernel during a live run.
    """
    cfg = ExperimentConfig(
        dim=2, condition=4.0, topology_kind=topology, n=nodes,
        samples_per_node=budget, seed=0,
    )
    result = run(cfg.sim_config(eta=1e-6))
    buffer = io.StringIO()
    result.ledger.export_events(buffer)
    gid_index = {}
    ops = []
    for _, event in parse_event_log(buffer.getvalue().splitlines()):
        if event[0] == "compute":
            _, producer, step = event
            gid_index[(producer, step)] = len(gid_index)
            ops.append(("reg", producer))
        else:
            _, applier, _, producer, step = event
            ops.append(("app", applier, gid_index[(producer, step)]))
    return nodes, ops


def time_kernel(kernel_cls, n_nodes, ops, repeats):
    """Best-of-N wall time for replaying the operation stream."""
    n_expected = sum(1 for op in ops if op[0] == "reg")
    best = float("inf")
    checksum = None
    for _ in range(repeats):
        kernel = kernel_cls(n_nodes, n_expected)
        total = 0
        start = time.perf_counter()
        for op in ops:
            if op[0] == "reg":
                kernel.register_gradient(op[1])
            else:
                tight, loose = kernel.apply_gradient(op[1], op[2])
                total += tight + loose
        elapsed = time.perf_counter() - start
        best = min(best, elapsed)
        if checksum is None:
            checksum = total
        elif checksum != total:
            raise RuntimeError("kernel replay is not deterministic")
    return best, checksum


END_TO_END_SNIPPET = """\
import time
from dasgd_sim.config import ExperimentConfig
from dasgd_sim.engine import run
from dasgd_sim._kernel import KERNEL_IMPL
cfg = ExperimentConfig(dim={dim}, condition=10.0, topology_kind={topology!r},
                       n={nodes}, samples_per_node={budget}, seed=0)
sim = cfg.sim_config(eta=1e-4)
run(sim)  # warm caches before timing
start = time.perf_counter()
run(sim)
print(KERNEL_IMPL, time.perf_counter() - start)
"""


def end_to_end(nodes, budget, topology, dim):
    rows = []
    for pure in (False, True):
        env = dict(os.environ)
        env.pop("DASGD_SIM_PURE", None)
        if pure:
            env["DASGD_SIM_PURE"] = "1"
        code = END_TO_END_SNIPPET.format(
            dim=dim, topology=topology, nodes=nodes, budget=budget)
        out = subprocess.run(
            [sys.executable, "-c", code], env=env,
            capture_output=True, text=True, check=True,
        ).stdout.split()
        rows.append((out[0], float(out[1])))
    return rows


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--nodes", type=int, default=8)
    parser.add_argument("--budget", type=int, default=300,
                        help="gradients per node in the schedule")
    parser.add_argument("--topology", default="fully_connected",
                        choices=("fully_connected", "ring"))
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--dim", type=int, default=20,
                        help="model dimension for --end-to-end")
    parser.add_argument("--end-to-end", action="store_true")
    args = parser.parse_args(argv)

    if args.end_to_end:
        rows = end_to_end(args.nodes, args.budget, args.topology, args.dim)
        for impl, elapsed in rows:
            print(f"{impl:>8}: {elapsed:8.3f} s  "
                  f"({args.nodes} nodes x {args.budget} steps, "
                  f"dim {args.dim}, {args.topology})")
        if len(rows) == 2 and rows[1][1] > 0:
            print(f"   ratio: {rows[1][1] / rows[0][1]:8.2f}x")
        return 0

    n_nodes, ops = protocol_schedule(args.nodes, args.budget, args.topology)
    n_events = len(ops)
    print(f"schedule: {args.topology}, {n_nodes} nodes, "
          f"{args.budget} steps/node, {n_events} kernel ops")

    pure_time, pure_sum = time_kernel(PureKernel, n_nodes, ops, args.repeats)
    print(f"    pure: {pure_time * 1e3:8.2f} ms  "
          f"({n_events / pure_time:,.0f} ops/s)")
    if CompiledKernel is None:
        print("compiled: not built (pip install -e . builds it)")
        return 0
    comp_time, comp_sum = time_kernel(CompiledKernel, n_nodes, ops,
                                      args.repeats)
    print(f"compiled: {comp_time * 1e3:8.2f} ms  "
          f"({n_events / comp_time:,.0f} ops/s)")
    if comp_sum != pure_sum:
        print("MISMATCH: implementations disagree on staleness totals")
        return 1
    print(f" speedup: {pure_time / comp_time:8.2f}x "
          f"(checksum {comp_sum} agrees)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
