"""Pure-numpy implementations of the hot kernels.

Semantics mirror the compiled extension exactly (same per-element operation
order), so either backend produces identical output.
"""

import numpy as np

from ._tables import EDGE_CANON, EDGE_TABLE, TRI_TABLE

KIND_SPHERE = 0
KIND_BOX = 1
KIND_TORUS = 2


def _child_sdf(kind: int, p: np.ndarray, pts: np.ndarray) -> np.ndarray:
    rel = pts - p[:3]
    if kind == KIND_SPHERE:
        return np.sqrt((rel * rel).sum(axis=1)) - p[3]
    if kind == KIND_BOX:
        q = np.abs(rel) - p[3:6]
        mq = np.maximum(q, 0.0)
        outside = np.sqrt((mq * mq).sum(axis=1))
        inside = np.minimum(np.maximum(np.maximum(q[:, 0], q[:, 1]), q[:, 2]), 0.0)
        return outside + inside
    if kind == KIND_TORUS:
        ring = np.sqrt(rel[:, 0] ** 2 + rel[:, 1] ** 2) - p[3]
        return np.sqrt(ring * ring + rel[:, 2] ** 2) - p[4]
    raise ValueError(f"unknown shape kind code {kind}")


def sdf_values(kinds: np.ndarray, params: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Signed distance of the union of primitives at each query point."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.full(pts.shape[0], np.inf)
    for k in range(len(kinds)):
        out = np.minimum(out, _child_sdf(int(kinds[k]), params[k], pts))
    return out


def sphere_trace(kinds, params, origins, dirs, t_near, t_far, tol, max_steps):
    """March each ray by the union signed distance; -1.0 marks no hit."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = origins.shape[0]
    t = np.full(n, t_near, dtype=np.float64)
    out = np.full(n, -1.0, dtype=np.float64)
    pending = np.arange(n)
    for _ in range(max_steps):
        if pending.size == 0:
            break
        p = origins[pending] + t[pending, None] * dirs[pending]
        d = sdf_values(kinds, params, p)
        hit = np.abs(d) < tol
        out[pending[hit]] = t[pending[hit]]
        inside = (~hit) & (d < 0.0)
        advance = ~(hit | inside)
        t[pending[advance]] += d[advance]
        overrun = np.zeros_like(advance)
        overrun[advance] = t[pending[advance]] > t_far
        pending = pending[advance & ~overrun]
    return out


def polygonize_cells(values, iso, origin, spacing, cells):
    """Emit marching-cubes triangles for the given active cells.

    Vertices on shared lattice edges are created once, in first-seen order,
    interpolated from the low-coordinate corner.
    """
    nx, ny, nz = values.shape
    m = cells.shape[0]
    verts: list = []
    tris: list = []
    edge_index: dict = {}
    if m == 0:
        return (np.zeros((0, 3), dtype=np.float64), np.zeros((0, 3), dtype=np.int64))

    cx, cy, cz = cells[:, 0], cells[:, 1], cells[:, 2]
    corner_vals = np.empty((m, 8), dtype=np.float64)
    for ci, (ox, oy, oz) in enumerate(
            [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
             (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)]):
        corner_vals[:, ci] = values[cx + ox, cy + oy, cz + oz]
    cases = ((corner_vals < iso) << np.arange(8)).sum(axis=1)

    ox0, oy0, oz0 = float(origin[0]), float(origin[1]), float(origin[2])
    local_ids = np.empty(12, dtype=np.int64)
    for row in range(m):
        case = int(cases[row])
        mask = EDGE_TABLE[case]
        if mask == 0:
            continue
        bx, by, bz = int(cx[row]), int(cy[row]), int(cz[row])
        for e in range(12):
            if not mask & (1 << e):
                continue
            ex, ey, ez, axis = EDGE_CANON[e]
            lx, ly, lz = bx + ex, by + ey, bz + ez
            key = ((lx * ny + ly) * nz + lz) * 3 + axis
            vid = edge_index.get(key)
            if vid is None:
                v0 = values[lx, ly, lz]
                if axis == 0:
                    v1 = values[lx + 1, ly, lz]
                elif axis == 1:
                    v1 = values[lx, ly + 1, lz]
                else:
                    v1 = values[lx, ly, lz + 1]
                frac = (iso - v0) / (v1 - v0)
                px = ox0 + spacing * lx
                py = oy0 + spacing * ly
                pz = oz0 + spacing * lz
                if axis == 0:
                    px += spacing * frac
                elif axis == 1:
                    py += spacing * frac
                else:
                    pz += spacing * frac
                vid = len(verts)
                verts.append((px, py, pz))
                edge_index[key] = vid
            local_ids[e] = vid
        tri = TRI_TABLE[case]
        for i in range(0, len(tri), 3):
            tris.append((local_ids[tri[i]], local_ids[tri[i + 1]], local_ids[tri[i + 2]]))

    return (np.asarray(verts, dtype=np.float64).reshape(-1, 3),
            np.asarray(tris, dtype=np.int64).reshape(-1, 3))
