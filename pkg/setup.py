import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # numpy fallback only
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("DCRNET_NO_EXT"):
    extensions = [
        Extension(
            "dcrnet.kernels._ckernels",
            ["src/dcrnet/kernels/_ckernels.pyx"],
            include_dirs=[np.get_include(), "src/dcrnet/kernels"],
            extra_compile_args=["-O3", "-march=native", "-fopenmp-simd", "-fno-trapping-math",
                                "-mprefer-vector-width=512"],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            optional=True,
        )
    ]
    ext_modules = cythonize(extensions, compiler_directives={"language_level": "3"})

setup(ext_modules=ext_modules)
