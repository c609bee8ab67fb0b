"""Build the optional Cython kernel extension.

The package is fully functional without the extension (a numpy fallback is
selected at import); `optional=True` keeps installation working on machines
without a C toolchain.
"""

from setuptools import Extension, setup

try:
    import numpy
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "kgtn._gru_ext",
                ["src/kgtn/_gru_ext.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        language_level=3,
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
