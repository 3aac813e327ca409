"""Process-level runtime switches.

R3D_THREADS pins the BLAS/OpenMP thread pools (the CLI exports it before
numpy loads); the value 1 additionally flags deterministic mode, in which
wall-clock fields in logs are zeroed so re-runs are byte-identical.
"""

from __future__ import annotations

import os

_THREAD_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS")


def deterministic_mode() -> bool:
    return os.environ.get("R3D_THREADS") == "1"


def export_thread_env():
    """Propagate R3D_THREADS to the BLAS thread knobs; call before numpy."""
    n = os.environ.get("R3D_THREADS")
    if n:
        for var in _THREAD_VARS:
            os.environ.setdefault(var, n)
