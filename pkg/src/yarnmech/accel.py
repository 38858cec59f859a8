"""Kernel backend selection.

The grid transfers, rod force assembly and per-edge strain response are
the hot inner loops of every simulation; they exist twice, as
numba-compiled loops and as vectorized pure numpy. The numba path is the
default whenever numba imports; set ``YARNMECH_DISABLE_NUMBA=1`` to force
the numpy path. ``benchmarks/bench_kernels.py`` compares the two.
"""

import os

DISABLE_ENV = "YARNMECH_DISABLE_NUMBA"


def _numba_requested() -> bool:
    return os.environ.get(DISABLE_ENV, "").strip().lower() not in ("1", "true", "yes")


def get_backend(name: str):
    """Return a kernel module by name ("numpy" or "numba")."""
    if name == "numpy":
        from . import _kernels_numpy

        return _kernels_numpy
    if name == "numba":
        from . import _kernels_numba

        return _kernels_numba
    raise ValueError(f"unknown kernel backend: {name!r}")


NUMBA_ENABLED = False
if _numba_requested():
    try:
        from . import _kernels_numba as _impl

        NUMBA_ENABLED = True
    except ImportError:
        from . import _kernels_numpy as _impl
else:
    from . import _kernels_numpy as _impl

BACKEND = _impl.BACKEND
p2g = _impl.p2g
gather_vec = _impl.gather_vec
gather_gradv = _impl.gather_gradv
scatter_grad_force = _impl.scatter_grad_force
stretch_forces = _impl.stretch_forces
bend_forces = _impl.bend_forces
signed_qr = _impl.signed_qr
edge_strain_response = _impl.edge_strain_response
