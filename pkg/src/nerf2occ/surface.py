"""Surface localization and extraction from an occupancy field.

Along a ray the surface sits at the first empty-to-occupied transition of
the field values across the 0.5 level; the crossing is refined by a
bracket-clamped secant iteration. Volumes are polygonized with marching
cubes (compiled kernel when available).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels

ISO_LEVEL = 0.5


@dataclass
class TriangleMesh:
    vertices: np.ndarray                 # (v, 3) float64
    triangles: np.ndarray                # (t, 3) int64
    vertex_normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle indices out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def drop_degenerate(self, min_area: float = 1e-12) -> "TriangleMesh":
        if not self.triangles.size:
            return self
        keep = self.face_areas() > min_area
        return TriangleMesh(self.vertices, self.triangles[keep])

    def compute_vertex_normals(self) -> np.ndarray:
        """Area-weighted average of incident face normals, normalized."""
        normals = np.zeros_like(self.vertices)
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        face_n = np.cross(b - a, c - a)  # length encodes 2x area
        for i in range(3):
            np.add.at(normals, self.triangles[:, i], face_n)
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        self.vertex_normals = normals / np.maximum(norms, 1e-12)
        return self.vertex_normals


# ---------------------------------------------------------------------------
# ray-surface localization


def find_flip(values) -> int | None:
    """Smallest k with value_k < 0.5 <= value_{k+1}.

    Rays whose first sample is already occupied have no empty-to-occupied
    transition and return None.
    """
    values = np.asarray(values).reshape(-1)
    if values.size < 2 or values[0] >= ISO_LEVEL:
        return None
    flips = np.nonzero((values[:-1] < ISO_LEVEL) & (values[1:] >= ISO_LEVEL))[0]
    return int(flips[0]) if flips.size else None


def find_flips_batch(values: np.ndarray) -> np.ndarray:
    """Vectorized find_flip over rows; -1 marks rays without a transition."""
    flips = (values[:, :-1] < ISO_LEVEL) & (values[:, 1:] >= ISO_LEVEL)
    has = flips.any(axis=1)
    idx = np.where(has, flips.argmax(axis=1), -1)
    idx[values[:, 0] >= ISO_LEVEL] = -1
    return idx


def secant_root(f, t_lo: float, t_hi: float, iso: float = ISO_LEVEL,
                n_iters: int = 8) -> float:
    """Root of f(t) = iso inside [t_lo, t_hi] with f(t_lo) < iso <= f(t_hi).

    Secant steps that leave the current bracket fall back to bisection; the
    result always stays inside the original bracket.
    """
    a, b = float(t_lo), float(t_hi)
    ga = f(a) - iso
    gb = f(b) - iso
    if not (ga < 0 <= gb):
        raise ValueError("bracket does not straddle the iso level")
    t0, g0, t1, g1 = a, ga, b, gb
    for _ in range(n_iters):
        denom = g1 - g0
        if denom == 0.0:
            t2 = 0.5 * (a + b)
        else:
            t2 = t1 - g1 * (t1 - t0) / denom
            if not a <= t2 <= b:
                t2 = 0.5 * (a + b)
        g2 = f(t2) - iso
        if g2 == 0.0:
            return t2
        if g2 < 0:
            a = t2
        else:
            b = t2
        t0, g0, t1, g1 = t1, g1, t2, g2
    return t1


def secant_roots_batch(eval_fn, lo, hi, g_lo, g_hi, iso: float = ISO_LEVEL,
                       n_iters: int = 8) -> np.ndarray:
    """Vectorized secant with bisection fallback over many brackets.

    `eval_fn(ts)` evaluates the field at a vector of ray parameters;
    `g_lo`/`g_hi` are the already-known field values at the bracket ends.
    """
    a = np.asarray(lo, dtype=np.float64).copy()
    b = np.asarray(hi, dtype=np.float64).copy()
    g0 = np.asarray(g_lo, dtype=np.float64) - iso
    g1 = np.asarray(g_hi, dtype=np.float64) - iso
    t0, t1 = a.copy(), b.copy()
    done = np.zeros(a.shape, dtype=bool)
    for _ in range(n_iters):
        denom = g1 - g0
        mid = 0.5 * (a + b)
        with np.errstate(divide="ignore", invalid="ignore"):
            t2 = t1 - g1 * (t1 - t0) / denom
        bad = (denom == 0.0) | ~np.isfinite(t2) | (t2 < a) | (t2 > b)
        t2 = np.where(bad, mid, t2)
        t2 = np.where(done, t1, t2)
        g2 = np.where(done, g1, eval_fn(t2) - iso)
        done = done | (g2 == 0.0)
        neg = (g2 < 0) & ~done
        pos = (g2 >= 0) & ~done
        a = np.where(neg, t2, a)
        b = np.where(pos, t2, b)
        t0, g0 = t1, g1
        t1, g1 = t2, g2
    return t1


def spatial_grad_fd(field, x, h: float = 1e-3) -> np.ndarray:
    """Central-difference spatial gradient of a scalar field closure.

    `field(points)` maps an (n, 3) array to n values.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=np.float64).reshape(3)
    probes = np.tile(x, (6, 1))
    for axis in range(3):
        probes[2 * axis, axis] += h
        probes[2 * axis + 1, axis] -= h
    vals = np.asarray(field(probes), dtype=np.float64).reshape(6)
    return (vals[0::2] - vals[1::2]) / (2.0 * h)


# ---------------------------------------------------------------------------
# level-set extraction


def marching_cubes(sampler, box_min, box_max, resolution: int,
                   iso: float = ISO_LEVEL, batch: int = 65536,
                   kernel_impl=None) -> TriangleMesh:
    """Polygonize the iso level set of `sampler` on a cubic lattice.

    `resolution` counts cells per axis (the lattice has resolution + 1
    points). `sampler(points)` maps (n, 3) world positions to field values.
    """
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    box_min = np.asarray(box_min, dtype=np.float64)
    box_max = np.asarray(box_max, dtype=np.float64)
    extent = box_max - box_min
    if not np.allclose(extent, extent[0]):
        raise ValueError("marching cubes grid must be cubic")
    spacing = float(extent[0]) / resolution
    n = resolution + 1

    axis = box_min[None, :] + spacing * np.arange(n)[:, None]
    values = np.empty((n, n, n), dtype=np.float64)
    xs, ys, zs = np.meshgrid(axis[:, 0], axis[:, 1], axis[:, 2], indexing="ij")
    lattice = np.stack([xs.reshape(-1), ys.reshape(-1), zs.reshape(-1)], axis=1)
    flat = values.reshape(-1)
    for start in range(0, lattice.shape[0], batch):
        flat[start:start + batch] = sampler(lattice[start:start + batch])

    verts, tris = _kernels.polygonize(values, iso, box_min, spacing,
                                      impl=kernel_impl)
    return TriangleMesh(verts, tris).drop_degenerate()


# ---------------------------------------------------------------------------
# OBJ export / import


def export_obj(mesh: TriangleMesh, path: str) -> None:
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write("v %.6f %.6f %.6f\n" % (v[0], v[1], v[2]))
        for t in mesh.triangles:
            f.write("f %d %d %d\n" % (t[0] + 1, t[1] + 1, t[2] + 1))


def import_obj(path: str) -> TriangleMesh:
    verts, tris = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts or parts[0] in ("#",):
                continue
            try:
                if parts[0] == "v":
                    if len(parts) != 4:
                        raise ValueError("expected 3 coordinates")
                    verts.append([float(p) for p in parts[1:]])
                elif parts[0] == "f":
                    if len(parts) != 4:
                        raise ValueError("expected 3 vertex indices")
                    tris.append([int(p.split("/")[0]) - 1 for p in parts[1:]])
                else:
                    raise ValueError(f"unsupported directive {parts[0]!r}")
            except ValueError as err:
                raise ValueError(f"{path}:{lineno}: malformed OBJ line: {err}") from None
    return TriangleMesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3),
                        np.asarray(tris, dtype=np.int64).reshape(-1, 3))


def edge_face_counts(mesh: TriangleMesh) -> dict:
    """Undirected edge -> incident triangle count (watertightness audits)."""
    counts: dict = {}
    for tri in mesh.triangles:
        for i in range(3):
            e = (int(tri[i]), int(tri[(i + 1) % 3]))
            key = (min(e), max(e))
            counts[key] = counts.get(key, 0) + 1
    return counts
