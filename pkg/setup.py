import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "framepred._prop_kernel",
                ["src/framepred/_prop_kernel.pyx"],
                extra_compile_args=["-O3"],
                include_dirs=[numpy.get_include()],
            )
        ],
        language_level=3,
    )
except ImportError:
    # Pure-Python fallback in framepred.propagation covers the kernel.
    extensions = []

setup(ext_modules=extensions)
