from setuptools import Extension, setup
from Cython.Build import cythonize

# -ffp-contract=off keeps the C kernels bit-identical to the numpy
# fallbacks (no FMA contraction of a*b+c).
flags = ["-O3", "-ffp-contract=off"]

extensions = [
    Extension(
        "mrfica.kernels._epg_cy",
        ["src/mrfica/kernels/_epg_cy.pyx"],
        extra_compile_args=flags,
    ),
    Extension(
        "mrfica.kernels._match_cy",
        ["src/mrfica/kernels/_match_cy.pyx"],
        extra_compile_args=flags,
    ),
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )
)
