import os

import numpy as np
from setuptools import Extension, setup

# INCLINE_NO_EXT=1 skips the compiled core; the package then runs on the
# pure-Python kernels.
ext_modules = []
if not os.environ.get("INCLINE_NO_EXT"):
    from Cython.Build import cythonize

    extensions = [
        Extension(
            "incline._kernels",
            ["src/incline/_kernels.pyx"],
            include_dirs=[np.get_include()],
            # no FMA contraction: results must match the Python fallback bit for bit
            extra_compile_args=["-O2", "-ffp-contract=off", "-fno-fast-math"],
        )
    ]
    ext_modules = cythonize(
        extensions,
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )

setup(ext_modules=ext_modules)
