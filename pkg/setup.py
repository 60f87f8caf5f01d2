"""Build script: compiles the optional Cython kernel extension.

The package is fully functional without the extension (the import shim in
statm._kernels falls back to the NumPy implementations), so any failure
here downgrades to a pure-Python install instead of aborting.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("STATM_SKIP_EXT") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "statm._kernels._ckernels",
                    ["src/statm/_kernels/_ckernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
                "initializedcheck": False,
            },
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
