"""Selects the compiled range coder kernels, falling back to pure Python."""

import os

if os.environ.get("PIVOTC_PURE") == "1":
    from . import _pykernels as impl
else:
    try:
        from . import _ckernels as impl
    except ImportError:  # extension not built
        from . import _pykernels as impl

RangeEncoder = impl.RangeEncoder
RangeDecoder = impl.RangeDecoder
occupancy_context = impl.occupancy_context
BACKEND = impl.BACKEND
