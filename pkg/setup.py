"""Build script: compiles the optional TV kernel extension.

The package works without the extension (a numpy fallback is selected at
import time), so any failure here is non-fatal by design: build with
``PNPINC_PURE=1 pip install -e . --no-build-isolation`` to skip compilation.
"""

import os

from setuptools import setup

ext_modules = []
if not os.environ.get("PNPINC_PURE"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools.extension import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "pnpinc._tv_core",
                    ["src/pnpinc/_tv_core.pyx"],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
