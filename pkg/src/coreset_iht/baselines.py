"""Random-selection baseline for coreset construction."""

from __future__ import annotations

import numpy as np

from .problem import WeightVector


def uniform_coreset(n: int, k: int, seed) -> WeightVector:
    """Pick k of n points uniformly without replacement, each weighted n/k.

    The inverse-inclusion-probability weight makes the weighted
    log-likelihood an unbiased estimate of the full one.
    """
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=k, replace=False)
    w = np.zeros(n)
    w[idx] = n / k
    return WeightVector(w)
