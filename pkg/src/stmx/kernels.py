"""Backend selection for the depthwise convolution kernels.

The compiled backend is used when it imports; otherwise the NumPy one.
Set ``STMX_KERNELS=python`` to force the fallback, ``STMX_KERNELS=cython``
to require the compiled build.
"""

import importlib
import os

from . import _kernels_py


def load_backend(name="auto"):
    """Return the kernel module for ``name`` (``auto``, ``cython`` or ``python``)."""
    if name == "python":
        return _kernels_py
    if name not in ("auto", "cython"):
        raise ValueError(f"unknown kernel backend {name!r}")
    try:
        return importlib.import_module("stmx._kernels")
    except ImportError:
        if name == "cython":
            raise
        return _kernels_py


def available_backends():
    names = ["python"]
    try:
        importlib.import_module("stmx._kernels")
    except ImportError:
        pass
    else:
        names.insert(0, "cython")
    return names


_backend = load_backend(os.environ.get("STMX_KERNELS", "auto"))
BACKEND = _backend.NAME
dwconv2d_valid = _backend.dwconv2d_valid
dwconv1d_valid = _backend.dwconv1d_valid
