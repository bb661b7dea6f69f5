"""Hot-kernel backend selection.

The inner loop of the sampler (table interpolation, binary-luminosity
combination, Gaussian error terms) exists twice: a compiled Cython core
(`_ckernels`) and a pure-numpy fallback (`py_kernels`) with identical
signatures. The compiled core is used when the extension was built;
setting the environment variable ``CMDFIT_PURE_PYTHON`` forces the
fallback. ``benchmarks/bench_kernels.py`` compares the two.
"""

import os

from . import py_kernels

_LANE = py_kernels
if not os.environ.get("CMDFIT_PURE_PYTHON"):
    try:
        from . import _ckernels

        _LANE = _ckernels
    except ImportError:
        pass

BACKEND = _LANE.BACKEND


def active_lane():
    """Module implementing the kernel functions selected at import time."""
    return _LANE


def available_lanes():
    """All importable kernel implementations, keyed by backend name."""
    lanes = {py_kernels.BACKEND: py_kernels}
    try:
        from . import _ckernels as ck

        lanes[ck.BACKEND] = ck
    except ImportError:
        pass
    return lanes
