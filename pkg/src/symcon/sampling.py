"""Deterministic low-discrepancy sampling of rectangular domains."""

from __future__ import annotations

import warnings

import numpy as np
from scipy.stats import qmc

__all__ = ["sample_box", "time_grid"]


def sample_box(bounds, count, seed=0):
    """``count`` Sobol points in the box given by ``bounds`` [(lo, hi), ...].

    Unscrambled sequence, so results are reproducible run-to-run; ``seed``
    fast-forwards the sequence to decorrelate independent uses.
    """
    bounds = [tuple(b) for b in bounds]
    d = len(bounds)
    if d == 0:
        return np.zeros((count, 0))
    sampler = qmc.Sobol(d, scramble=False)
    if seed:
        sampler.fast_forward(int(seed))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        u = sampler.random(count)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    return lo + u * (hi - lo)


def time_grid(horizon, count=64):
    """Uniform time samples over [0, horizon] including both endpoints."""
    if horizon <= 0:
        return np.array([0.0])
    return np.linspace(0.0, float(horizon), count)
