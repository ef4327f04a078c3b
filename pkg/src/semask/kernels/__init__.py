"""Hot-kernel dispatch.

``SEMASK_KERNELS`` selects the implementation:

* ``auto`` (default) - per-kernel best: bilinear resampling from the
  compiled extension (its scatter backward is 10-20x faster than
  ``np.add.at``), convolutions from the numpy backend (BLAS-backed
  tensordot beats scalar loops); falls back to numpy when the extension
  is missing
* ``cython``         - the compiled extension for everything (fails if missing)
* ``numpy``          - the pure fallback for everything

All implementations share index conventions and are interchangeable up to
floating-point summation order; ``benchmarks/bench_kernels.py`` reproduces
the measurements behind the auto choice.
"""

from __future__ import annotations

import os

from semask.kernels import numpy_backend

_KERNEL_FNS = (
    "conv2d_forward",
    "conv2d_backward_input",
    "conv2d_backward_kernel",
    "bilinear_forward",
    "bilinear_backward",
)

__all__ = list(_KERNEL_FNS) + ["backend_name", "available_backends", "get_backend"]


def _load_compiled():
    try:
        from semask.kernels import _fast
        return _fast
    except ImportError:
        return None


def available_backends() -> list[str]:
    names = ["numpy"]
    if _load_compiled() is not None:
        names.insert(0, "cython")
    return names


def get_backend(name: str):
    """Return the backend module for an explicit name ('cython' or 'numpy')."""
    if name == "numpy":
        return numpy_backend
    if name == "cython":
        mod = _load_compiled()
        if mod is None:
            raise ImportError(
                "SEMASK_KERNELS=cython but the compiled extension is not built; "
                "reinstall the package or set SEMASK_KERNELS=numpy"
            )
        return mod
    raise ValueError(f"unknown kernel backend {name!r}; use auto, cython or numpy")


_CHOICE = os.environ.get("SEMASK_KERNELS", "auto").lower()
_compiled = _load_compiled()

if _CHOICE == "auto":
    _conv_impl = numpy_backend
    _resize_impl = _compiled or numpy_backend
elif _CHOICE in ("cython", "numpy"):
    _conv_impl = _resize_impl = get_backend(_CHOICE)
else:
    raise ValueError(f"SEMASK_KERNELS={_CHOICE!r} invalid; use auto, cython or numpy")


def backend_name() -> str:
    if _conv_impl is _resize_impl:
        return "numpy" if _conv_impl is numpy_backend else "cython"
    return "hybrid"


conv2d_forward = _conv_impl.conv2d_forward
conv2d_backward_input = _conv_impl.conv2d_backward_input
conv2d_backward_kernel = _conv_impl.conv2d_backward_kernel
bilinear_forward = _resize_impl.bilinear_forward
bilinear_backward = _resize_impl.bilinear_backward
