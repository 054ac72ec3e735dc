import os

from setuptools import Extension, setup

_PYX = "src/ctxforest/_kernels/core.pyx"

try:
    import numpy as np
    from Cython.Build import cythonize

    have_cython = True
except ImportError:
    have_cython = False

if have_cython and os.path.exists(_PYX):
    ext_modules = cythonize(
        [
            Extension(
                "ctxforest._kernels.core",
                [_PYX],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
else:
    # No Cython/numpy at build time: install pure-Python only, the package
    # falls back to the numpy kernels at import.
    ext_modules = []

setup(ext_modules=ext_modules)
