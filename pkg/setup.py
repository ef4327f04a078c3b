"""Build script for the optional compiled kernel extension.

The package works without the extension (pure numpy fallback); the build is
marked optional so a missing C toolchain degrades gracefully.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext = Extension(
        "semask.kernels._fast",
        sources=["src/semask/kernels/_fast.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
    ext_modules = cythonize([ext], language_level=3)
    for e in ext_modules:
        e.optional = True
except ImportError:
    pass

setup(ext_modules=ext_modules)
