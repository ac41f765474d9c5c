"""Build hook for the optional Cython fast-kernel extension.

The package is fully functional without the extension (a numpy fallback is
selected at import time); building it just speeds up the hot loops. If no
compiler or Cython is available the extension is skipped instead of failing
the install.
"""

import os

from setuptools import setup


def build_ext_modules():
    if os.environ.get("AVVA_SKIP_EXT"):
        return []
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        return []
    ext = Extension(
        "avva.kernels._ckernels",
        sources=[os.path.join("src", "avva", "kernels", "_ckernels.pyx")],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        language="c",
    )
    return cythonize([ext], language_level=3)


setup(ext_modules=build_ext_modules())
