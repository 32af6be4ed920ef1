"""Kernel backend selection.

Set VIDKIT_NUMBA=0 to force the pure-numpy fallback; otherwise the numba
path is used when numba imports cleanly. `BACKEND` records which one won.
"""

import os

from . import numpy_impl

_want_numba = os.environ.get("VIDKIT_NUMBA", "1") != "0"

if _want_numba:
    try:
        from . import numba_impl as _impl

        BACKEND = "numba"
    except ImportError:
        _impl = numpy_impl
        BACKEND = "numpy"
else:
    _impl = numpy_impl
    BACKEND = "numpy"

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
convt2d_forward = _impl.convt2d_forward
convt2d_backward = _impl.convt2d_backward
maxpool2d_forward = _impl.maxpool2d_forward
maxpool2d_backward = _impl.maxpool2d_backward
