"""Build script for the optional compiled kernel core.

The package works without the extension: arnvs.kernels falls back to the
pure-numpy implementations if arnvs.kernels._core is missing or fails to
build. Set ARNVS_PURE_PYTHON=1 to force the fallback at runtime.
"""

import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "arnvs.kernels._core",
                ["src/arnvs/kernels/_core.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3", "-fopenmp"],
                extra_link_args=["-fopenmp"],
                optional=True,
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
