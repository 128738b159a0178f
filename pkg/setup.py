import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "tilediff.nn._conv_cy",
        ["src/tilediff/nn/_conv_cy.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3", "-march=native", "-funroll-loops", "-ffast-math"],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
