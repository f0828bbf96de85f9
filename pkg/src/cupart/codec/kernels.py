"""Kernel backend selection.

The compiled extension is used when it imports; setting
``CUPART_PURE_PYTHON=1`` forces the numpy fallback.
"""

import os

from . import _pykernels

if os.getenv("CUPART_PURE_PYTHON") == "1":
    backend = _pykernels
else:
    try:
        from . import _ckernels as backend
    except ImportError:  # extension not built
        backend = _pykernels

BACKEND = backend.BACKEND
cu_stats = backend.cu_stats
leaf_cost = backend.leaf_cost
oracle_ctu = backend.oracle_ctu
guided_ctu = backend.guided_ctu


def available_backends():
    out = {"python": _pykernels}
    try:
        from . import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
