"""Digamma and trigamma on the positive real axis.

Both functions shift the argument upward with the recurrence until it
exceeds ``_SHIFT`` and then evaluate the asymptotic Bernoulli series.
Scalars and numpy arrays are accepted; scalars come back as floats.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

_SHIFT = 10.0

# B_2n / (2n) for n = 1..8
_DIGAMMA_COEFS = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
    -3617.0 / 8160.0,
)

# B_2n for n = 1..8
_TRIGAMMA_COEFS = (
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
)


def _prepare(x):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
        raise ValidationError("argument must be finite and > 0")
    return arr.copy()


def _horner(coefs, z):
    acc = np.zeros_like(z)
    for c in reversed(coefs):
        acc = acc * z + c
    return acc


def digamma(x):
    """Logarithmic derivative of the gamma function for x > 0."""
    scalar = np.ndim(x) == 0
    z = _prepare(x)
    acc = np.zeros_like(z)
    low = z < _SHIFT
    while np.any(low):
        acc[low] -= 1.0 / z[low]
        z[low] += 1.0
        low = z < _SHIFT
    inv2 = 1.0 / (z * z)
    series = inv2 * _horner(_DIGAMMA_COEFS, inv2)
    out = acc + np.log(z) - 0.5 / z - series
    return float(out) if scalar else out


def trigamma(x):
    """Derivative of :func:`digamma` for x > 0."""
    scalar = np.ndim(x) == 0
    z = _prepare(x)
    acc = np.zeros_like(z)
    low = z < _SHIFT
    while np.any(low):
        acc[low] += 1.0 / (z[low] * z[low])
        z[low] += 1.0
        low = z < _SHIFT
    inv = 1.0 / z
    inv2 = inv * inv
    series = inv * inv2 * _horner(_TRIGAMMA_COEFS, inv2)
    out = acc + inv + 0.5 * inv2 + series
    return float(out) if scalar else out
