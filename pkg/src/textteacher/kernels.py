"""Hot-loop dispatch: compiled Cython kernels when built, pure-Python otherwise.

Set ``TT_PURE_PYTHON=1`` to force the fallback (used by the benchmark and the
equivalence tests).
"""
import logging
import os

from . import _fallback

logger = logging.getLogger(__name__)

BACKEND = "python"
if os.environ.get("TT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        logger.debug("compiled kernels unavailable; using pure-Python fallback")
        _impl = _fallback
else:
    _impl = _fallback

xoshiro_fill = _impl.xoshiro_fill
fnv1a64 = _impl.fnv1a64
jacobi_eig = _impl.jacobi_eig
