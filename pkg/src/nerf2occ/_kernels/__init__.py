"""Hot numeric kernels with a compiled core and a pure-numpy fallback.

The compiled extension is preferred when importable; set
``NERF2OCC_KERNELS=python`` or ``NERF2OCC_KERNELS=compiled`` to force a
backend. Both produce identical output (asserted by the test suite), so the
choice affects speed only.
"""

import os

import numpy as np

from . import _fallback

try:
    from . import _core
except ImportError:
    _core = None

HAVE_COMPILED = _core is not None

_forced = os.environ.get("NERF2OCC_KERNELS", "").strip().lower()
if _forced == "python":
    _impl = _fallback
elif _forced == "compiled":
    if _core is None:
        raise ImportError(
            "NERF2OCC_KERNELS=compiled but the compiled kernel extension is not built; "
            "install the package with its Cython extension or unset the variable")
    _impl = _core
elif _forced:
    raise ImportError(f"NERF2OCC_KERNELS must be 'python' or 'compiled', got {_forced!r}")
else:
    _impl = _core if _core is not None else _fallback


def backend_name() -> str:
    return "compiled" if _impl is _core else "python"


def set_flush_denormals() -> bool:
    """Enable flush-to-zero for subnormals on this thread when the compiled
    extension is present; returns whether the mode was set."""
    if _core is not None:
        return _core.set_flush_denormals()
    return False


def get_backend(name: str):
    """Explicit backend module, for cross-checks and benchmarks."""
    if name == "python":
        return _fallback
    if name == "compiled":
        if _core is None:
            raise ValueError("compiled kernel backend is not available")
        return _core
    raise ValueError(f"unknown kernel backend {name!r}")


def sdf_values(kinds, params, points):
    return _impl.sdf_values(kinds, params, points)


def sphere_trace(kinds, params, origins, dirs, t_near, t_far, tol=1e-5, max_steps=256):
    return _impl.sphere_trace(kinds, params, origins, dirs,
                              float(t_near), float(t_far), float(tol), int(max_steps))


def find_active_cells(values: np.ndarray, iso: float) -> np.ndarray:
    """Cells whose corner values straddle the iso level, in lexicographic order."""
    below = values < iso
    b = below[:-1, :-1, :-1]
    a = ~below[:-1, :-1, :-1]
    for sx in (0, 1):
        for sy in (0, 1):
            for sz in (0, 1):
                if sx == sy == sz == 0:
                    continue
                corner = below[sx:sx + values.shape[0] - 1,
                               sy:sy + values.shape[1] - 1,
                               sz:sz + values.shape[2] - 1]
                b = b | corner
                a = a | ~corner
    return np.ascontiguousarray(np.argwhere(b & a), dtype=np.int64)


def polygonize(values, iso, origin, spacing, impl=None):
    """Marching cubes over a dense value grid: (vertices, triangles)."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    if values.ndim != 3 or min(values.shape) < 2:
        raise ValueError(f"value grid must be 3-D with at least 2 lattice points per axis, got {values.shape}")
    cells = find_active_cells(values, float(iso))
    mod = impl if impl is not None else _impl
    return mod.polygonize_cells(values, float(iso), np.asarray(origin, dtype=np.float64),
                                float(spacing), cells)
