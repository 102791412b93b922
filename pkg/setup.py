import os

from setuptools import Extension, setup

# The compiled kernel lane is optional: if Cython or a C compiler is missing,
# the package installs anyway and stlgm._kernels falls back to numpy code.
_PYX = "src/stlgm/_kernels/_ext.pyx"
ext_modules = []
if os.environ.get("STLGM_NO_EXT", "0") != "1" and os.path.exists(_PYX):
    try:
        import numpy
        from Cython.Build import cythonize

        np_random_lib = os.path.join(os.path.dirname(numpy.__file__), "random", "lib")
        ext_modules = cythonize(
            [
                Extension(
                    "stlgm._kernels._ext",
                    [_PYX],
                    include_dirs=[numpy.get_include()],
                    library_dirs=[np_random_lib],
                    libraries=["npyrandom"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
