#!/usr/bin/env python3
"""Times the compiled geometry kernels against the pure-numpy fallback.

Checks bit-identical outputs first (the fallback is the reference), then
reports per-call milliseconds and the speedup at desk-scale cloud sizes.
Run from the repo root:  python3 benchmarks/bench_kernels.py
"""

import time

import numpy as np

from r3d.kernels import backend_name, fallback, fps_indices, knn_indices
from r3d.rng import Rng

try:
    from r3d.kernels import _geomcore
except ImportError:
    _geomcore = None

CASES = [
    # (n_points, n_centers, k)
    (256, 32, 16),
    (1024, 64, 32),
    (4096, 128, 32),
    (8192, 256, 64),
]
REPEATS = 5


def _time(fn) -> float:
    best = float("inf")
    for _ in range(REPEATS):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def main():
    print(f"active backend: {backend_name()}")
    if _geomcore is None:
        print("compiled extension not built; timing the fallback only")
    rng = Rng(0)
    header = f"{'case':>18} {'fps numpy':>10} {'fps cython':>11} {'x':>6} {'knn numpy':>10} {'knn cython':>11} {'x':>6}"
    print(header)
    print("-" * len(header))
    for n_p, n_c, k in CASES:
        pts = rng.uniform(-0.5, 0.5, size=(n_p, 3)).astype(np.float32)
        idx_ref = fps_indices(pts, n_c, 0, impl=fallback)
        knn_ref = knn_indices(pts, idx_ref, k, impl=fallback)
        t_fps_np = _time(lambda: fps_indices(pts, n_c, 0, impl=fallback))
        t_knn_np = _time(lambda: knn_indices(pts, idx_ref, k, impl=fallback))
        if _geomcore is not None:
            if not np.array_equal(fps_indices(pts, n_c, 0, impl=_geomcore), idx_ref):
                raise AssertionError(f"fps backends disagree at {(n_p, n_c, k)}")
            if not np.array_equal(knn_indices(pts, idx_ref, k, impl=_geomcore), knn_ref):
                raise AssertionError(f"knn backends disagree at {(n_p, n_c, k)}")
            t_fps_cy = _time(lambda: fps_indices(pts, n_c, 0, impl=_geomcore))
            t_knn_cy = _time(lambda: knn_indices(pts, idx_ref, k, impl=_geomcore))
            print(f"{f'{n_p}/{n_c}/{k}':>18} {t_fps_np:>9.2f}ms {t_fps_cy:>10.3f}ms "
                  f"{t_fps_np / t_fps_cy:>5.1f}x {t_knn_np:>9.2f}ms {t_knn_cy:>10.3f}ms "
                  f"{t_knn_np / t_knn_cy:>5.1f}x")
        else:
            print(f"{f'{n_p}/{n_c}/{k}':>18} {t_fps_np:>9.2f}ms {'-':>11} {'-':>6} "
                  f"{t_knn_np:>9.2f}ms {'-':>11} {'-':>6}")
    if _geomcore is not None:
        print("outputs bit-identical across backends for every case")


if __name__ == "__main__":
    main()
