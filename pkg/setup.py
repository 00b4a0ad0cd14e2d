from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "codec_resynth._kernels",
        ["src/codec_resynth/_kernels.pyx"],
        # no FMA contraction: keeps results bit-identical to the numpy fallback
        extra_compile_args=["-O3", "-ffp-contract=off"],
        optional=True,
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={"language_level": "3"},
    )
)
