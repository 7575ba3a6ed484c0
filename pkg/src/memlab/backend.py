"""Kernel backend selection.

The hot inner loops (training steps, pairwise distances, K-NN voting) exist
twice: a numba-compiled version and a pure numpy one. Set MEMLAB_BACKEND=numpy
to force the fallback; the default is numba whenever it imports. Run
``python benchmarks/bench_kernels.py`` to compare the two.
"""

import os

ENV_VAR = "MEMLAB_BACKEND"
_CHOICES = ("numba", "numpy")


def _detect() -> str:
    requested = os.environ.get(ENV_VAR, "").strip().lower()
    if requested and requested not in _CHOICES:
        raise ValueError(f"{ENV_VAR} must be one of {_CHOICES}, got {requested!r}")
    if requested == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if requested == "numba":
            raise
        return "numpy"
    return "numba"


ACTIVE = _detect()


def active_backend() -> str:
    """Name of the kernel backend selected at import time."""
    return ACTIVE
