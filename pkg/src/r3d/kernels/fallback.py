"""Pure-numpy geometry kernels, bit-identical to the compiled extension.

Identity hinges on three things: coordinates are upcast to float64 before any
arithmetic (exact for f32 inputs), squared distances are formed as
dx*dx + dy*dy + dz*dz with no fused multiply-adds on either side, and ties
resolve to the lowest index (first-occurrence argmax here, strict compares in
the C loop).
"""

from __future__ import annotations

import numpy as np


def fps_indices(pts: np.ndarray, n: int, start: int) -> np.ndarray:
    """Greedy max-min sampling of n indices from pts [N, 3], seeded at start."""
    N = pts.shape[0]
    p64 = pts.astype(np.float64)
    sel = np.empty(n, dtype=np.int64)
    d = np.full(N, np.inf)
    sel[0] = start
    d[start] = -1.0  # sentinel: selected points never win again
    last = start
    for t in range(1, n):
        delta = p64 - p64[last]
        nd = delta[:, 0] * delta[:, 0] + delta[:, 1] * delta[:, 1] + delta[:, 2] * delta[:, 2]
        np.minimum(d, nd, out=d, where=d >= 0.0)
        best = int(np.argmax(d))  # first occurrence of the max: lowest index
        sel[t] = best
        d[best] = -1.0
        last = best
    return sel


def knn_indices(pts: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """For each center index, the k nearest point indices sorted by (d2, index)."""
    p64 = pts.astype(np.float64)
    c64 = p64[centers]
    dx = p64[None, :, 0] - c64[:, 0, None]
    dy = p64[None, :, 1] - c64[:, 1, None]
    dz = p64[None, :, 2] - c64[:, 2, None]
    d2 = dx * dx + dy * dy + dz * dz
    order = np.argsort(d2, axis=1, kind="stable")
    return np.ascontiguousarray(order[:, :k].astype(np.int64))
