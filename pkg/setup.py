"""Build hook for the optional compiled attention kernel.

The package works without it: ``memformer.kernels`` falls back to numpy
when the extension is missing.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("MEMFORMER_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "memformer.kernels._attention",
                    ["src/memformer/kernels/_attention.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3", "-march=native"],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
                "initializedcheck": False,
            },
        )

setup(ext_modules=ext_modules)
