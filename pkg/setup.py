"""Build script: compiles the optional fast kernels, falls back to pure Python.

The extension is a performance accelerator only; every code path has a
pure-numpy twin selected at import time (see dpfedsim._backend).
"""

import sys

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "dpfedsim._kernels",
                ["src/dpfedsim/_kernels.pyx"],
                include_dirs=[np.get_include()],
                # No -ffast-math / -march: the kernels must round exactly like
                # the pure backend's elementwise numpy ops (no FMA contraction).
                extra_compile_args=["-O3", "-ffp-contract=off"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError as exc:
    sys.stderr.write(
        f"dpfedsim: building without compiled kernels ({exc}); "
        "the pure-python backend will be used.\n"
    )

setup(ext_modules=ext_modules)
