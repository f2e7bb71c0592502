"""Sinusoidal positional encodings with explicit period ranges."""

from __future__ import annotations

import numpy as np


def encoding_periods(spec):
    """dim/2 periods geometrically spaced from min_period to max_period."""
    n = spec.dim // 2
    if n == 1:
        return np.array([spec.max_period])
    ratio = spec.max_period / spec.min_period
    return spec.min_period * ratio ** (np.arange(n) / (n - 1))


def sinusoid_encode(values, spec):
    """Encode scalars as [sin(2 pi v / p_i), cos(2 pi v / p_i)].

    values: any shape; returns values.shape + (spec.dim,).
    """
    v = np.asarray(values, dtype=np.float64)
    periods = encoding_periods(spec)
    phase = 2.0 * np.pi * v[..., None] / periods
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)
