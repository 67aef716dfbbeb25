import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# Strict IEEE semantics on purpose: the kernels promise a fixed accumulation
# order, so no -ffast-math and no value-changing vectorizer tricks.
extensions = [
    Extension(
        "fbquant._kernels",
        sources=["src/fbquant/_kernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3", "-fopenmp"],
        extra_link_args=["-fopenmp"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    ),
)
