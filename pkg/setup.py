import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

# The extension is optional: without Cython the package falls back to the
# pure-numpy kernels in mimofan._pykernels.
ext_modules = []
if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "mimofan._ckernels",
                ["src/mimofan/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
