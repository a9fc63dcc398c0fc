"""Build the optional compiled kernels.

The package works without them: ``gradsense.kernels`` falls back to numpy
when the extension is missing or fails to build.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("GRADSENSE_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "gradsense._ckernels",
                    sources=["src/gradsense/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
