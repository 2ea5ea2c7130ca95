"""Deterministic simulation and analysis of decentralized asynchronous
SGD: per-node protocol execution over configurable topologies, exact
gradient-set staleness measurement, and evaluators for the matching
stepsize and convergence-rate formulas."""

from dasgd_sim._kernel import KERNEL_IMPL

__version__ = "0.1.0"
__all__ = ["KERNEL_IMPL", "__version__"]
