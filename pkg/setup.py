import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    # The package still works without the compiled kernel: the numpy
    # fallback in dashsearch.kernels is selected at import time.
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "dashsearch.kernels._scan",
                ["src/dashsearch/kernels/_scan.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
