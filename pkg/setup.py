"""Build hook for the optional compiled fern kernels.

``pip install -e . --no-build-isolation`` compiles ``fernnet._fernkernels``
when Cython is importable; otherwise the package installs without it and
falls back to the numpy kernels at import time.
"""
import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("FERNNET_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [Extension("fernnet._fernkernels", ["src/fernnet/_fernkernels.pyx"],
                       include_dirs=[np.get_include()], extra_compile_args=["-O3"])],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
