"""JIT selection.

Hot kernels are compiled with numba unless ``IMPLREG_DISABLE_NUMBA`` is set to
a truthy value, in which case the pure-numpy implementations are used.
"""

import os

_FALSY = ("", "0", "false", "no", "off")

USE_NUMBA = os.environ.get("IMPLREG_DISABLE_NUMBA", "").strip().lower() in _FALSY

if USE_NUMBA:
    try:
        import numba
    except ImportError:  # pragma: no cover - numba is a declared dependency
        USE_NUMBA = False

if USE_NUMBA:
    njit = numba.njit(cache=True, fastmath=False)
else:

    def njit(func):
        return func


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
