"""Builds the optional compiled splatting core.

If Cython or a C compiler is missing the package still installs and runs on
the numpy fallback.
"""
import os

from setuptools import setup


def _extensions():
    if os.environ.get("EGOFIELD_NO_EXT"):
        return []
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        return []
    ext = Extension(
        "egofield.splat._core",
        ["src/egofield/splat/_core.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        # no -ffast-math: results must be reproducible across builds
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=_extensions())
