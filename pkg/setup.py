"""Builds the optional Cython kernel extension.

If Cython or a C compiler is unavailable the package still installs and
falls back to the numpy implementations in ``sphemu.kernels``.
"""
from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize
except ImportError:  # pragma: no cover - build without the extension
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "sphemu._kernels",
                ["src/sphemu/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
