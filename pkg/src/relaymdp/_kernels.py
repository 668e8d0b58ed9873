"""Shared numeric kernels for the backward-induction solvers."""
from __future__ import annotations

import numpy as np


def expect_over_max(values: np.ndarray, pmf: np.ndarray, cdf: np.ndarray) -> np.ndarray:
    """E_R[ V(max{b, R}) ] for every best-reward state b, including "none".

    ``values`` holds V over the real reward bins along the last axis (length
    n_bins); leading axes are batch dimensions.  Returns an array with last
    axis n_bins + 1: entry b is cdf[b] * V[b] + sum_{r > b} pmf[r] * V[r], and
    the appended entry is the unconditional expectation sum_r pmf[r] * V[r]
    (the "no reward yet" state, where max{none, R} = R).

    One summation path (a single reversed cumsum) serves every entry, so
    callers that feed identical rows get bitwise-identical results.
    """
    pv = pmf * values
    n_bins = pv.shape[-1]
    # rev[..., j] = sum_{i >= j} pmf[i] * V[i]
    rev = np.flip(np.cumsum(np.flip(pv, axis=-1), axis=-1), axis=-1)
    out = np.empty(pv.shape[:-1] + (n_bins + 1,))
    out[..., :n_bins] = cdf * values
    out[..., : n_bins - 1] += rev[..., 1:]
    out[..., n_bins] = rev[..., 0]
    return out
