"""Build script for the optional compiled convolution core.

The package is fully functional without the extension (a pure-numpy
backend is selected at import time); the extension just makes training
several times faster. Build failures therefore emit a warning instead
of aborting the install.
"""
import os
import sys

from setuptools import setup, Extension
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Build the Cython core if possible, fall back to pure Python."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            sys.stderr.write(
                f"warning: compiled kernels not built ({exc}); "
                "segaware will use the pure-numpy backend\n"
            )

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            sys.stderr.write(
                f"warning: {ext.name} failed to compile ({exc}); "
                "segaware will use the pure-numpy backend\n"
            )


def extensions():
    import numpy as np
    from Cython.Build import cythonize

    compile_args = ["-O3", "-ffast-math", "-fopenmp", "-std=c99"]
    if not os.environ.get("SEGAWARE_NO_NATIVE"):
        compile_args += ["-march=native", "-mprefer-vector-width=512"]
    ext = Extension(
        "segaware.kernels._cykernels",
        sources=["src/segaware/kernels/_cykernels.pyx"],
        extra_compile_args=compile_args,
        extra_link_args=["-fopenmp"],
        include_dirs=[np.get_include()],
    )
    return cythonize([ext], language_level=3)


setup(
    ext_modules=extensions(),
    cmdclass={"build_ext": OptionalBuildExt},
)
