"""Numba switch.

Set ``PGNER_DISABLE_NUMBA=1`` to run every kernel through its pure-numpy
path.  The flag is read once, at import time.
"""

import logging
import os

logger = logging.getLogger(__name__)

_DISABLED = os.environ.get("PGNER_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    if _DISABLED:
        raise ImportError("disabled by PGNER_DISABLE_NUMBA")
    import numba

    logging.getLogger("numba").setLevel(logging.WARNING)
    USE_NUMBA = True
except ImportError:
    numba = None
    USE_NUMBA = False


# The LSTM kernels are dominated by exp/tanh.  numpy runs those through SIMD
# loops; numba only matches that when it links Intel SVML, so without SVML the
# LSTM stays on the numpy path (see benchmarks/bench_kernels.py).
LSTM_NUMBA = False
if USE_NUMBA:
    from numba.core import config as _nb_config

    LSTM_NUMBA = bool(getattr(_nb_config, "USING_SVML", False))


def maybe_njit(func):
    """Compile ``func`` with ``numba.njit`` when available, else return it untouched."""
    if USE_NUMBA:
        return numba.njit(cache=True)(func)
    return func


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
