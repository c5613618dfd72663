"""Kernel backend selection: compiled extension when present, numpy fallback.

The hot loop of training and evaluation is the per-bag forward/backward pass
over many small matrices, where Python call overhead dominates. When the
Cython extension built alongside the package is importable it is used by
default; otherwise the numpy reference implementation runs. Selection can be
forced with the SEGMILCBM_KERNEL environment variable or the `kernel` config
key ("auto", "compiled", "numpy").
"""

import os

from ..errors import ConfigError
from . import numpy_backend

try:
    from . import compiled_backend

    HAVE_COMPILED = True
except ImportError:
    compiled_backend = None
    HAVE_COMPILED = False

BACKEND_NAMES = ("auto", "compiled", "numpy")


def get_backend(name: str = "auto"):
    """Resolve a backend module exposing NAME, forward_many, batch_backward."""
    if name == "auto":
        name = os.environ.get("SEGMILCBM_KERNEL", "auto")
    if name == "auto":
        return compiled_backend if HAVE_COMPILED else numpy_backend
    if name == "numpy":
        return numpy_backend
    if name == "compiled":
        if not HAVE_COMPILED:
            raise ConfigError(
                "compiled kernel backend requested but the extension is not built"
            )
        return compiled_backend
    raise ConfigError(f"kernel must be one of {BACKEND_NAMES}, got {name!r}")
