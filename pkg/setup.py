import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("RIGIDSEG_SKIP_EXT"):
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "rigidseg.kernels._core",
                    ["src/rigidseg/kernels/_core.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # No Cython: the package still works through the pure fallback.
        ext_modules = []

setup(ext_modules=ext_modules)
