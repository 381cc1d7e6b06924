"""Build script for the compiled convolution kernels.

The extension is optional: when Cython or a C compiler is unavailable the
package installs without it and ``countshift.kernels`` falls back to the
numpy implementation at import time.
"""

import os

from setuptools import setup

ext_modules = []
if not os.environ.get("COUNTSHIFT_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "countshift._ckernels",
                    ["src/countshift/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
