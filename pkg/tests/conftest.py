"""Test-session runtime: pin thread counts before numpy loads so the whole
suite runs in deterministic mode (byte-identical artifacts, zeroed wall_ms)."""

import os

os.environ.setdefault("R3D_THREADS", "1")

from r3d import runtime

runtime.export_thread_env()
