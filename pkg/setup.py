"""Build script: compiles the optional Cython kernel core.

The package works without the compiled extension (a pure-Python fallback is
selected at import time), so a failed extension build is tolerated rather
than fatal.
"""

import sys

from setuptools import setup
from setuptools.command.build_ext import build_ext


def extensions():
    try:
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        return []
    # -ffp-contract=off keeps the compiled kernels bit-identical to the
    # pure-Python reference (no FMA contraction of a*b+c).
    ext = Extension(
        "saekit._kernels._core",
        ["src/saekit/_kernels/_core.pyx"],
        extra_compile_args=["-O3", "-ffp-contract=off"],
    )
    return cythonize([ext], language_level=3)


class optional_build_ext(build_ext):
    """Skip the extension (with a notice) when no compiler is available."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # pragma: no cover - depends on toolchain
            print(f"NOTE: compiled kernels skipped ({exc}); "
                  "pure-Python fallback will be used", file=sys.stderr)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # pragma: no cover - depends on toolchain
            print(f"NOTE: building {ext.name} failed ({exc}); "
                  "pure-Python fallback will be used", file=sys.stderr)


setup(
    ext_modules=extensions(),
    cmdclass={"build_ext": optional_build_ext},
)
