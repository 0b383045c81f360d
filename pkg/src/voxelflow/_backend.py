"""Kernel backend selection.

The compiled ``_core`` extension is used when it imports; otherwise the
numpy fallback. Set ``VOXELFLOW_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _fallback

kernels = _fallback
NAME = "python"

if os.environ.get("VOXELFLOW_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _core
    except ImportError:  # extension not built
        pass
    else:
        kernels = _core
        NAME = "cython"


def available():
    """Names of the backends importable in this environment."""
    names = ["python"]
    try:
        from . import _core  # noqa: F401
    except ImportError:
        return names
    return names + ["cython"]


def get(name):
    if name == "python":
        return _fallback
    if name == "cython":
        from . import _core
        return _core
    raise ValueError(f"unknown backend {name!r}")
