"""Hot numeric kernels with a compiled fast path.

At import time the Cython extension is preferred; if it was not built (or
``AVVA_PURE_PYTHON`` is set to a non-empty value) the numpy fallback is used.
``BACKEND`` reports which one is active. ``benchmarks/bench_kernels.py``
compares the two.
"""

import os

from . import _pykernels

if os.environ.get("AVVA_PURE_PYTHON"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _pykernels

BACKEND = _impl.BACKEND

softmax_rows = _impl.softmax_rows
softmax_rows_grad = _impl.softmax_rows_grad
attend_batch = _impl.attend_batch
true_match_ranks = _impl.true_match_ranks

__all__ = [
    "BACKEND",
    "softmax_rows",
    "softmax_rows_grad",
    "attend_batch",
    "true_match_ranks",
]
