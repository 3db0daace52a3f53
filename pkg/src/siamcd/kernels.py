"""Pixel kernels with a compiled backend and a numpy fallback.

The compiled module is used when it imports; setting ``SIAMCD_PURE_PYTHON=1``
forces the fallback. ``BACKEND`` names the active one.
"""

import os

from siamcd import _fallback

try:
    if os.environ.get("SIAMCD_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure python requested")
    from siamcd import _kernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _fallback
    BACKEND = "python"

rasterize_polygons = _impl.rasterize_polygons
confusion_counts = _impl.confusion_counts
window_sums = _impl.window_sums


def available_backends():
    """Map of backend name to kernel module, for tests and benchmarks."""
    backends = {"python": _fallback}
    try:
        from siamcd import _kernels

        backends["cython"] = _kernels
    except ImportError:
        pass
    return backends
