"""Builds the optional compiled attention kernel.

The package works without it (a numpy fallback is selected at import);
the extension just makes the tiled path fast.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "jiang._tiled_kernel",
                sources=["src/jiang/_tiled_kernel.pyx"],
                include_dirs=[np.get_include()],
                # no -ffast-math: the kernel's masking relies on IEEE infinities
                extra_compile_args=["-O3", "-march=native"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
