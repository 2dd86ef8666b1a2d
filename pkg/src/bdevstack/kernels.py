"""Hot-path byte kernels with a compiled core and a pure-Python fallback.

The compiled module ``_xorcore`` is built from Cython when available. Set
``BDEVSTACK_PURE_PYTHON=1`` to force the fallback (useful for comparing the two
paths, see ``benchmarks/bench_kernels.py``).
"""

import os

from . import _xorpy

if os.environ.get("BDEVSTACK_PURE_PYTHON", "") not in ("", "0"):
    _impl = _xorpy
    BACKEND = "python"
else:
    try:
        from . import _xorcore as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _xorpy
        BACKEND = "python"

xor_blocks = _impl.xor_blocks
xor_into = _impl.xor_into

__all__ = ["BACKEND", "xor_blocks", "xor_into"]
