"""Optional compiled kernel for the counter-based RNG hash lattice.

The package is pure Python; the extension only accelerates the integer hash
pipeline and is skipped (with a warning) when Cython or a C compiler is
missing.  Both backends produce bit-identical streams.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "fastslow._rng_cy",
                ["src/fastslow/_rng_cy.pyx"],
                include_dirs=[np.get_include()],
                optional=True,
            )
        ],
        language_level=3,
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
