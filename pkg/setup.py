"""Build script: compiles the optional sequence-kernel extension.

The package works without the extension (pure-Python kernels are selected
at import time), so a failed compile only costs speed, not functionality.
"""

import warnings

import numpy
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Allow the install to proceed when no C toolchain is available."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, misconfigured, ...
            warnings.warn(
                f"building the tuneqa._ckern extension failed ({exc}); "
                "falling back to the pure-Python kernels"
            )

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            warnings.warn(
                f"compiling {ext.name} failed ({exc}); "
                "falling back to the pure-Python kernels"
            )


extensions = [
    Extension(
        "tuneqa.kernels._ckern",
        sources=["src/tuneqa/kernels/_ckern.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(extensions, compiler_directives={"language_level": "3"})
except ImportError:
    warnings.warn("Cython not available; installing without compiled kernels")
    ext_modules = []

setup(ext_modules=ext_modules, cmdclass={"build_ext": OptionalBuildExt})
