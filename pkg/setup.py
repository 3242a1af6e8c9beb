"""Build script for the optional compiled kernel backend.

The package is fully functional without the extension (a pure-Python twin
of every kernel ships in moeforge._kernels_py); set MOEFORGE_NO_EXT=1 to
skip compilation entirely.

-ffp-contract=off matters: fused multiply-adds would change rounding and
break the byte-identity contract between the compiled and pure backends.
"""

import os

from setuptools import setup

ext_modules = []
if not os.environ.get("MOEFORGE_NO_EXT"):
    try:
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "moeforge._kernels_c",
                    ["src/moeforge/_kernels_c.pyx"],
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
