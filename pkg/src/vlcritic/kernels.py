"""Hot-loop kernels: frame rasterization and kinematic pushing.

The compiled extension is used when it was built; otherwise the numpy
implementation is selected. Set ``VLCRITIC_BACKEND=python`` to force the
fallback. ``BACKEND`` names the active implementation.
"""

import os

from . import _pykernels

_forced = os.environ.get("VLCRITIC_BACKEND", "").lower()

try:
    if _forced == "python":
        raise ImportError("python backend forced")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    if _forced == "cython":
        raise
    _impl = _pykernels
    BACKEND = "python"

render_frame = _impl.render_frame
push_step = _impl.push_step

SHAPE_IDS = {"square": 0, "circle": 1, "triangle": 2}


def backends():
    """Return a mapping of every importable backend name to its module."""
    found = {"python": _pykernels}
    try:
        from . import _ckernels

        found["cython"] = _ckernels
    except ImportError:
        pass
    return found
