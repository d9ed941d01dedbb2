"""Backend selection for the hot loops.

The compiled extension is used when importable. Set ``TAGCORR_PURE_PYTHON=1``
to force the numpy fallback.
"""

import os

from . import _pykernels

if os.environ.get("TAGCORR_PURE_PYTHON"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

coincidence_counts = _impl.coincidence_counts
dead_time_mask = _impl.dead_time_mask

__all__ = ["BACKEND", "coincidence_counts", "dead_time_mask"]
