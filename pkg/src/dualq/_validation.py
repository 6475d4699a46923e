"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

from __future__ import annotations

import numbers

import numpy as np

from .exceptions import ConfigError, DomainError, InvalidPolicyError

ROW_SUM_TOL = 1e-12


def check_stochastic_rows(probs, name="policy", tol=ROW_SUM_TOL, error=InvalidPolicyError):
    """Return ``probs`` as a float array after checking each row is a distribution."""
    probs = np.asarray(probs, dtype=float)
    if probs.ndim < 1 or probs.shape[-1] == 0:
        raise error(f"{name}: expected a non-empty probability array, got shape {probs.shape}")
    if not np.all(np.isfinite(probs)):
        raise error(f"{name}: contains non-finite entries")
    if np.any(probs < 0):
        raise error(f"{name}: contains negative probabilities")
    err = np.abs(probs.sum(axis=-1) - 1.0)
    if np.any(err > tol):
        bad = np.unravel_index(int(np.argmax(err)), err.shape)
        raise error(f"{name}: row {bad} sums to {probs[bad].sum()!r}, not 1")
    return probs


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < minimum:
        raise ConfigError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_probability(value, name, low_open=False, high_open=False):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ConfigError(f"{name} must be a finite real, got {value!r}")
    lo_bad = value <= 0 if low_open else value < 0
    hi_bad = value >= 1 if high_open else value > 1
    if lo_bad or hi_bad:
        lo = "(" if low_open else "["
        hi = ")" if high_open else "]"
        raise ConfigError(f"{name} must lie in {lo}0, 1{hi}, got {value!r}")
    return float(value)


def check_index(value, size, name):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or not 0 <= value < size:
        raise DomainError(f"{name} {value!r} outside [0, {size})")
    return int(value)


def check_index_array(values, size, name):
    values = np.asarray(values)
    if values.size and (not np.issubdtype(values.dtype, np.integer)
                        or values.min() < 0 or values.max() >= size):
        raise DomainError(f"{name} contains ids outside [0, {size})")
    return values.astype(np.int64, copy=False)
