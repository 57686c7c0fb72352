"""Kernel backend selection.

The compiled extension is used when importable; otherwise, or when the
environment variable ``BAYESCMB_PURE=1`` is set, the numpy fallback is used.
"""

import os

from . import _lapkernel_py

_force_pure = os.environ.get("BAYESCMB_PURE", "") not in ("", "0")

if _force_pure:
    _impl = _lapkernel_py
else:
    try:
        from . import _lapkernel as _impl
    except ImportError:  # extension not built
        _impl = _lapkernel_py

BACKEND = "compiled" if _impl is not _lapkernel_py else "numpy"

lap_combine = _impl.lap_combine
lap_combine_numpy = _lapkernel_py.lap_combine


def compiled_available() -> bool:
    try:
        from . import _lapkernel  # noqa: F401
    except ImportError:
        return False
    return True
