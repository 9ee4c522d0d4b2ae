"""Build hook for the optional compiled kernels.

The package works without a compiler; ``gridtrade.kernels`` falls back to the
numpy implementation when the extension is missing.
"""
from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "gridtrade._kernels",
                ["src/gridtrade/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:  # no Cython or numpy at build time: pure-Python install
    pass

setup(ext_modules=ext_modules)
