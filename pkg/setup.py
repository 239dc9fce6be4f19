"""Build script: compiles the fast-loop extension when a toolchain exists.

The package is fully functional without the extension (the pure-Python
reference loops are used instead), so any failure to cythonize or compile
downgrades to a warning rather than aborting the install.
"""

import warnings

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # toolchain missing or broken
            warnings.warn(f"fast-loop extension not built ({exc}); "
                          "falling back to the pure-Python backend")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            warnings.warn(f"fast-loop extension {ext.name} failed to compile "
                          f"({exc}); falling back to the pure-Python backend")


def extensions():
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError as exc:
        warnings.warn(f"Cython/numpy unavailable ({exc}); "
                      "building without the fast-loop extension")
        return []
    ext = Extension(
        "uecbf._fastloop",
        ["src/uecbf/_fastloop.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], language_level=3)


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})
