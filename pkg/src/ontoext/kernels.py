"""Hot string-distance kernels, compiled when available.

The Cython build (``_ckernels``) is preferred. Set ``ONTOEXT_PURE_PYTHON=1``
to force the pure-Python fallback.
"""

from __future__ import annotations

import os

from . import _kernels_py

IMPLEMENTATION = "python"

if os.environ.get("ONTOEXT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        IMPLEMENTATION = "cython"
    except ImportError:
        _impl = _kernels_py
else:
    _impl = _kernels_py

levenshtein = _impl.levenshtein
ratio = _impl.ratio
max_ratio = _impl.max_ratio

__all__ = ["IMPLEMENTATION", "levenshtein", "max_ratio", "ratio"]
