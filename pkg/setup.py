"""Build script.  The staleness kernel has a Cython implementation that we
try to compile here; if the toolchain is missing the package still installs
and falls back to the pure-Python kernel at import time."""

from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        ["src/dasgd_sim/_staleness_core.pyx"],
        language_level=3,
        compiler_directives={
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
