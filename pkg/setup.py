from setuptools import Extension, setup

# The compiled kernels are optional: when Cython (or a C compiler) is
# unavailable the package falls back to the numpy implementation at import.
ext_modules = []
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [Extension("fednn._ckernels", ["src/fednn/_ckernels.pyx"])],
        language_level="3",
    )
except Exception as exc:  # pragma: no cover - build-environment dependent
    print("fednn: skipping compiled kernels (%s); using numpy fallback" % exc)

setup(ext_modules=ext_modules)
