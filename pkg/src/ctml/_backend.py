"""Select the projector kernel implementation at import time.

The compiled Cython core is used when it imports; otherwise the numpy
fallback. ``CTML_BACKEND=python`` forces the fallback.
"""

import os

from . import _joseph_py

NAME = "python"
kernels = _joseph_py

if os.environ.get("CTML_BACKEND", "").lower() != "python":
    try:
        from . import _joseph as _compiled
    except ImportError:
        pass
    else:
        kernels = _compiled
        NAME = "cython"


def get(name=None):
    """Return the kernel module by name ("cython", "python") or the active one."""
    if name is None:
        return kernels
    if name == "python":
        return _joseph_py
    if name == "cython":
        from . import _joseph
        return _joseph
    raise ValueError(f"unknown backend {name!r}")


def available():
    names = ["python"]
    try:
        from . import _joseph  # noqa: F401
    except ImportError:
        return names
    return ["cython"] + names
