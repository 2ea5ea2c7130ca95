"""Shared independent oracles for the test suite."""

import numpy as np


def central_difference_gradient(loss, x, h=1e-6):
    """Gradient of `loss` at x by central differences, one coordinate at a
    time."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for i in range(x.size):
        bump = np.zeros_like(x)
        bump[i] = h
        out[i] = (loss(x + bump) - loss(x - bump)) / (2.0 * h)
    return out


def relative_error(got, want):
    got = np.asarray(got, dtype=float)
    want = np.asarray(want, dtype=float)
    scale = max(1.0, float(np.linalg.norm(want)))
    return float(np.linalg.norm(got - want)) / scale
