import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("LGS_PURE_PYTHON", "") in ("", "0"):
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError:
        print("Cython/numpy unavailable at build time; using pure-python kernels")
    else:
        extensions = [
            Extension(
                "latent_gaze._ckernels",
                ["src/latent_gaze/_ckernels.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
            )
        ]
        ext_modules = cythonize(extensions, compiler_directives={"language_level": "3"})

setup(ext_modules=ext_modules)
