"""Kernel backend selection.

The environment variable CMESEG_BACKEND picks the implementation of the
hot numeric loops:

  auto   (default) numba if importable, else pure numpy
  numba  require the jitted kernels
  numpy  force the pure-numpy fallback

Both backends expose identical signatures and fixed reduction orders;
``use_backend`` swaps them temporarily (benchmarks, equivalence tests).
"""

import contextlib
import os

from ..errors import ConfigError

_CHOICES = ("auto", "numba", "numpy")


def _load(choice):
    if choice not in _CHOICES:
        raise ConfigError(
            f"CMESEG_BACKEND must be one of {_CHOICES}, got {choice!r}")
    if choice == "numpy":
        from . import numpy_backend as impl
        return impl
    if choice == "numba":
        from . import numba_backend as impl
        return impl
    try:
        from . import numba_backend as impl
    except ImportError:
        from . import numpy_backend as impl
    return impl


_impl = _load(os.environ.get("CMESEG_BACKEND", "auto").strip().lower())


def active_backend():
    """Name of the backend currently serving kernel calls."""
    return _impl.NAME


@contextlib.contextmanager
def use_backend(name):
    """Temporarily route kernel calls through the named backend."""
    global _impl
    prev = _impl
    _impl = _load(name)
    try:
        yield _impl
    finally:
        _impl = prev


def _dispatch(fname):
    def call(*args, **kwargs):
        return getattr(_impl, fname)(*args, **kwargs)
    call.__name__ = fname
    return call


conv2d_forward = _dispatch("conv2d_forward")
conv2d_grad_input = _dispatch("conv2d_grad_input")
conv2d_grad_kernel = _dispatch("conv2d_grad_kernel")
deconv2d_forward = _dispatch("deconv2d_forward")
deconv2d_grad_input = _dispatch("deconv2d_grad_input")
deconv2d_grad_kernel = _dispatch("deconv2d_grad_kernel")
maxpool2x2_forward = _dispatch("maxpool2x2_forward")
maxpool2x2_backward = _dispatch("maxpool2x2_backward")
crf_spatial_messages = _dispatch("crf_spatial_messages")
crf_bilateral_messages = _dispatch("crf_bilateral_messages")
crf_pairwise_energy = _dispatch("crf_pairwise_energy")
bm3d_block_distances = _dispatch("bm3d_block_distances")
