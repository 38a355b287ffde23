"""Small numeric helpers shared across modules."""

import numpy as np


def round_half_away(x):
    """Round to nearest integer, ties away from zero.

    Works on scalars and arrays; returns float values (callers cast).
    ``np.round`` rounds ties to even, which is not what the codec wants.
    """
    x = np.asarray(x, dtype=np.float64)
    mag = np.abs(x)
    whole = np.floor(mag)
    # mag - whole is exact in binary floating point
    out = whole + (mag - whole >= 0.5)
    return np.copysign(out, x)


def round_half_away_int(x):
    return round_half_away(x).astype(np.int64)


def div_round_half_away(num, den):
    """Integer ``num / den`` rounded half away from zero, for num >= 0, den > 0."""
    num = np.asarray(num, dtype=np.int64)
    den = np.asarray(den, dtype=np.int64)
    return (2 * num + den) // (2 * den)
