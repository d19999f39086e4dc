"""Builds the optional Cython search kernel.

The package is fully functional without the extension: tactmem._kernels
falls back to a NumPy implementation at import time. Build in place with

    python3 setup.py build_ext --inplace

or simply `pip install -e . --no-build-isolation`, which compiles it as a
side effect.
"""

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "tactmem._kernels._hnswcore",
                ["src/tactmem/_kernels/_hnswcore.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
