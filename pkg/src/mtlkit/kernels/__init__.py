"""Kernel backend selection.

The compiled extension is used when importable. Set MTLKIT_KERNELS=python to
force the NumPy fallback, or MTLKIT_KERNELS=cython to fail loudly when the
extension is missing instead of falling back silently.
"""

import os
from contextlib import contextmanager

from . import pyk

_requested = os.environ.get("MTLKIT_KERNELS", "").strip().lower()

if _requested == "python":
    _impl = pyk
    BACKEND = "python"
elif _requested in ("", "cython"):
    try:
        from . import _ckern as _impl
        BACKEND = "cython"
    except ImportError:
        if _requested == "cython":
            raise
        _impl = pyk
        BACKEND = "python"
else:
    raise ValueError(
        f"MTLKIT_KERNELS={_requested!r} is not recognized; use 'python' or 'cython'"
    )

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_kernels = _impl.conv2d_backward_kernels
maxpool2d_forward = _impl.maxpool2d_forward
maxpool2d_backward = _impl.maxpool2d_backward


def available_backends():
    """Names of backends importable in this environment."""
    names = ["python"]
    try:
        from . import _ckern  # noqa: F401
        names.append("cython")
    except ImportError:
        pass
    return names


def backend_module(name):
    """Fetch a specific backend module by name, independent of the selection."""
    if name == "python":
        return pyk
    if name == "cython":
        from . import _ckern
        return _ckern
    raise ValueError(f"unknown kernel backend {name!r}")


_KERNEL_NAMES = (
    "conv2d_forward",
    "conv2d_backward_input",
    "conv2d_backward_kernels",
    "maxpool2d_forward",
    "maxpool2d_backward",
)


@contextmanager
def use_backend(name):
    """Temporarily reroute the selected kernels to a specific backend.

    Callers that hold direct references to the kernel functions are not
    affected; anything calling through this module (the autodiff ops do) is.
    """
    global BACKEND
    mod = backend_module(name)
    saved = {k: globals()[k] for k in _KERNEL_NAMES}
    saved_name = BACKEND
    for k in _KERNEL_NAMES:
        globals()[k] = getattr(mod, k)
    BACKEND = name
    try:
        yield mod
    finally:
        globals().update(saved)
        BACKEND = saved_name
