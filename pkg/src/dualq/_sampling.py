"""Vectorized categorical sampling by inverse c.d.f."""

from __future__ import annotations

import numpy as np

_DENSE_LIMIT = 4_000_000


def sample_rows(probs, rng, n=None):
    """Draw one index per row of ``probs`` (shape ``(m, k)``), or ``n`` i.i.d.
    indices per row when ``n`` is given (result shape ``(m, n)``)."""
    probs = np.asarray(probs, dtype=float)
    cdf = np.cumsum(probs, axis=-1)
    k = probs.shape[-1]
    if n is None:
        u = rng.random(probs.shape[0])
        idx = (cdf <= u[:, None]).sum(axis=-1)
    else:
        u = rng.random((probs.shape[0], n))
        # compare in row chunks to bound the (rows, n, k) temporary
        step = max(1, _DENSE_LIMIT // max(1, n * k))
        idx = np.empty(u.shape, dtype=np.int64)
        for lo in range(0, probs.shape[0], step):
            hi = lo + step
            idx[lo:hi] = (cdf[lo:hi, None, :] <= u[lo:hi, :, None]).sum(axis=-1)
    # guard against the last c.d.f. entry rounding below 1
    return np.minimum(idx, k - 1).astype(np.int64)
