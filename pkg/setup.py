import os

from setuptools import Extension, setup

# -ffp-contract=off keeps gcc from fusing a*b+c into fma, which would change
# rounding and break bitwise equality with the pure-python backend.
COMPILE_ARGS = ["-O3", "-ffp-contract=off"]

ext_modules = []
if os.environ.get("XBT_NO_EXT") != "1":
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "xbt.kernels._matmul_c",
                ["src/xbt/kernels/_matmul_c.pyx"],
                extra_compile_args=COMPILE_ARGS,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
