"""Build the optional compiled kernels.

The package works without them: ``lfmkit.kernels`` falls back to the numpy
implementation when the extension is missing.
"""
import os
import sys

from setuptools import setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            print(f"warning: compiled kernels not built ({exc}); using numpy fallback", file=sys.stderr)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: failed to build {ext.name} ({exc}); using numpy fallback", file=sys.stderr)


def _extensions():
    if os.environ.get("LFMKIT_NO_EXT"):
        return []
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        return []
    # -ffp-contract=off keeps multiply-add rounding identical to the numpy path.
    flags = ["-O3", "-ffp-contract=off", "-fopenmp"]
    ext = Extension(
        "lfmkit._kernels",
        ["src/lfmkit/_kernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=flags,
        extra_link_args=["-fopenmp"],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=_extensions(), cmdclass={"build_ext": OptionalBuildExt})
