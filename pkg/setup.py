"""Build script for the optional compiled geometry kernels.

The package is pure Python plus one Cython extension (r3d.kernels._geomcore)
holding the farthest-point-sampling and kNN inner loops. If the extension
cannot be built (no compiler, R3D_SKIP_EXT=1) the install still succeeds and
the package falls back to the bit-identical numpy implementation at import.

Floating point flags matter here: the numpy fallback computes squared
distances as separate float64 multiplies and adds, so the C code must not
fuse those into FMAs or the two backends stop agreeing bit for bit.
"""

import os

from setuptools import setup

ext_modules = []
if not os.environ.get("R3D_SKIP_EXT"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "r3d.kernels._geomcore",
                    ["src/r3d/kernels/_geomcore.pyx"],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    # -ffp-contract=off: keep dx*dx+dy*dy+dz*dz un-fused so the
                    # compiled path matches the numpy fallback exactly.
                    extra_compile_args=["-O2", "-ffp-contract=off"],
                )
            ],
            language_level=3,
        )
    except Exception as exc:  # pragma: no cover - build-env dependent
        print(f"warning: skipping compiled kernels ({exc}); numpy fallback will be used")
        ext_modules = []

setup(ext_modules=ext_modules)
