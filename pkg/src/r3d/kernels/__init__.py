"""Geometry kernels with a compiled core and a pure-numpy fallback.

At import this package picks the Cython extension if it built, else the numpy
implementation; R3D_DISABLE_EXT=1 forces the fallback. Both produce identical
bits (see benchmarks/bench_kernels.py, which also times them). Callers go
through the validating wrappers here, never through a backend directly.
"""

from __future__ import annotations

import os

import numpy as np

from . import fallback as _fallback

_impl = _fallback
BACKEND = "numpy"
if not os.environ.get("R3D_DISABLE_EXT"):
    try:
        from . import _geomcore as _ext

        _impl = _ext
        BACKEND = "cython"
    except ImportError:
        pass


def backend_name() -> str:
    return BACKEND


def _check_points(pts: np.ndarray) -> np.ndarray:
    pts = np.ascontiguousarray(pts, dtype=np.float32)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected points [N, 3], got {pts.shape}")
    return pts


def fps_indices(pts: np.ndarray, n: int, start: int, impl=None) -> np.ndarray:
    """Farthest point sampling; returns int64 [n] with out[0] == start."""
    pts = _check_points(pts)
    N = pts.shape[0]
    if N == 0:
        raise ValueError("farthest point sampling on an empty cloud")
    if not (0 < n <= N):
        raise ValueError(f"cannot sample {n} points from {N}")
    if not (0 <= start < N):
        raise ValueError(f"start index {start} out of range [0, {N})")
    return (impl or _impl).fps_indices(pts, n, start)


def knn_indices(pts: np.ndarray, centers: np.ndarray, k: int, impl=None) -> np.ndarray:
    """k nearest neighbours of each center index; int64 [C, k], (d2, idx) order."""
    pts = _check_points(pts)
    centers = np.ascontiguousarray(centers, dtype=np.int64)
    N = pts.shape[0]
    if centers.ndim != 1:
        raise ValueError("centers must be a 1-d index array")
    if not (0 < k <= N):
        raise ValueError(f"k={k} invalid for a cloud of {N} points")
    if centers.size and (centers.min() < 0 or centers.max() >= N):
        raise ValueError("center index out of range")
    return (impl or _impl).knn_indices(pts, centers, k)
