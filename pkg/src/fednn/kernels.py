"""Hot-kernel dispatch: compiled extension when built, numpy otherwise.

The two backends implement identical contracts (`nearest_centroid`,
`adc_scan`); `benchmarks/bench_kernels.py` compares their throughput.
"""

import numpy as np

from fednn import _pykernels

try:
    from fednn import _ckernels as _impl

    BACKEND = "cython"
except ImportError:  # extension not built; numpy fallback
    _impl = _pykernels
    BACKEND = "numpy"


def available_backends():
    names = ["numpy"]
    if _impl is not _pykernels:
        names.append("cython")
    return names


def get_backend(name):
    """Backend module by name, for side-by-side benchmarking/tests."""
    if name == "numpy":
        return _pykernels
    if name == "cython" and _impl is not _pykernels:
        return _impl
    raise ValueError("backend not available: %r" % (name,))


def _as_f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def nearest_centroid(points, centroids):
    """Nearest-centroid index (ties to lowest) and squared L2 distance."""
    return _impl.nearest_centroid(_as_f64(points), _as_f64(centroids))


def adc_scan(lut, codes):
    """Per-row sums of lookup-table entries selected by sub-codes."""
    codes = np.ascontiguousarray(codes, dtype=np.uint16)
    return _impl.adc_scan(_as_f64(lut), codes)
