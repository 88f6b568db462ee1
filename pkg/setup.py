import os

import numpy as np
from setuptools import Extension, setup

# CCF_NO_EXT=1 skips the compiled core; the package then runs on its numpy kernels.
ext_modules = []
if not os.environ.get("CCF_NO_EXT"):
    from Cython.Build import cythonize

    extensions = [
        Extension(
            "ccf._ext",
            ["src/ccf/_ext.pyx"],
            include_dirs=[np.get_include()],
            # no -ffast-math / fp contraction: both kernel paths must round identically
            extra_compile_args=["-O3", "-ffp-contract=off"],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        )
    ]
    ext_modules = cythonize(
        extensions,
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )

setup(ext_modules=ext_modules)
