"""Kernel backend selection.

The compiled extension is used when it was built; otherwise, or when the
environment variable ``ARTICMPC_PURE_PYTHON`` is set to a non-empty value
other than ``0``, the numpy fallback is loaded.
"""
import os

_force_python = os.environ.get("ARTICMPC_PURE_PYTHON", "") not in ("", "0")

if _force_python:
    from . import _fallback as _impl
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        from . import _fallback as _impl
        BACKEND = "python"

squared_edt = _impl.squared_edt
raycast_mark = _impl.raycast_mark
rollout_diffdrive = _impl.rollout_diffdrive
riccati_backward = _impl.riccati_backward
ray_boxes = _impl.ray_boxes

__all__ = [
    "BACKEND",
    "squared_edt",
    "raycast_mark",
    "rollout_diffdrive",
    "riccati_backward",
    "ray_boxes",
]
