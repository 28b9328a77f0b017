"""Hot numeric kernels with a compiled core and a pure-numpy fallback.

The compiled Cython extension (`_core`) is preferred; if it was not built,
or if PARTSTREAM_BACKEND=numpy is set, the numpy reference (`_ref`) is used.
Both expose the same functions with identical semantics; `set_backend`
switches at runtime (used by tests and the benchmark).
"""

import os

from . import _ref

try:
    from . import _core
except ImportError:
    _core = None

_BACKENDS = {"numpy": _ref}
if _core is not None:
    _BACKENDS["compiled"] = _core

_requested = os.environ.get("PARTSTREAM_BACKEND", "")
if _requested and _requested not in _BACKENDS:
    raise ImportError(
        f"PARTSTREAM_BACKEND={_requested!r} unavailable; options: {sorted(_BACKENDS)}"
    )
_impl = _BACKENDS[_requested] if _requested else _BACKENDS.get("compiled", _ref)


def available_backends():
    return sorted(_BACKENDS)


def get_backend():
    """Name of the active backend: 'compiled' or 'numpy'."""
    return _impl.NAME


def set_backend(name):
    global _impl
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; options: {sorted(_BACKENDS)}")
    _impl = _BACKENDS[name]


def im2col(x, kh, kw, stride, pad=0):
    return _impl.im2col(x, kh, kw, stride, pad)


def col2im(cols, h, w, kh, kw, stride, pad=0):
    return _impl.col2im(cols, h, w, kh, kw, stride, pad)


def cell_histograms(mag, ang, cell_px, bins, signed=False):
    return _impl.cell_histograms(mag, ang, cell_px, bins, signed)


def bilinear_crop(image, rect, out_px):
    return _impl.bilinear_crop(image, rect, out_px)
