import os

import numpy as np
from setuptools import Extension, setup

# Build in place with: python3 setup.py build_ext --inplace
# The compiled kernels are optional; slifmr falls back to numpy without them.
ext_modules = []
if os.environ.get("SLIFMR_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "slifmr._kernels",
                    ["src/slifmr/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
