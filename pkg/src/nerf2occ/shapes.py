"""Analytic signed-distance scenes: primitives, unions, tracing, sampling.

Shapes are normalized to fit inside the unit ball so a fixed near/far range
covers every camera frustum. Signed distances are negative inside, positive
outside, and Lipschitz-1 for primitives, which makes sphere tracing safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels

_KIND_CODES = {"sphere": 0, "box": 1, "torus": 2}


@dataclass
class AnalyticShape:
    """A primitive or a union of primitives, each with an RGB albedo."""

    kind: str
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0                  # sphere radius / torus ring radius
    half_extents: tuple = (0.5, 0.5, 0.5)
    tube_radius: float = 0.25            # torus tube radius
    albedo: tuple = (0.8, 0.25, 0.25)
    children: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sphere", "box", "torus", "union"):
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.kind == "union" and not self.children:
            raise ValueError("union shape requires children")

    def primitives(self):
        if self.kind == "union":
            out = []
            for c in self.children:
                out.extend(c.primitives())
            return out
        return [self]

    def flatten(self):
        """(kinds, params, albedos) arrays consumed by the kernels."""
        prims = self.primitives()
        kinds = np.zeros(len(prims), dtype=np.int32)
        params = np.zeros((len(prims), 7), dtype=np.float64)
        albedos = np.zeros((len(prims), 3), dtype=np.float64)
        for i, p in enumerate(prims):
            kinds[i] = _KIND_CODES[p.kind]
            params[i, :3] = p.center
            if p.kind == "sphere":
                params[i, 3] = p.radius
            elif p.kind == "box":
                params[i, 3:6] = p.half_extents
            else:
                params[i, 3] = p.radius
                params[i, 4] = p.tube_radius
            albedos[i] = p.albedo
        return kinds, params, albedos

    def bounds(self, pad: float = 0.1):
        """Axis-aligned bounding box (lo, hi) with padding."""
        los, his = [], []
        for p in self.primitives():
            c = np.asarray(p.center, dtype=np.float64)
            if p.kind == "sphere":
                r = np.full(3, p.radius)
            elif p.kind == "box":
                r = np.asarray(p.half_extents, dtype=np.float64)
            else:
                r = np.array([p.radius + p.tube_radius,
                              p.radius + p.tube_radius,
                              p.tube_radius])
            los.append(c - r)
            his.append(c + r)
        return (np.min(los, axis=0) - pad, np.max(his, axis=0) + pad)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "union":
            d["children"] = [c.to_dict() for c in self.children]
            return d
        d["center"] = list(self.center)
        d["albedo"] = list(self.albedo)
        if self.kind == "sphere":
            d["radius"] = self.radius
        elif self.kind == "box":
            d["half_extents"] = list(self.half_extents)
        else:
            d["radius"] = self.radius
            d["tube_radius"] = self.tube_radius
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AnalyticShape":
        kind = d.get("kind")
        if kind == "union":
            return cls(kind="union",
                       children=[cls.from_dict(c) for c in d["children"]])
        kwargs = {"kind": kind}
        for key in ("center", "radius", "half_extents", "tube_radius", "albedo"):
            if key in d:
                val = d[key]
                kwargs[key] = tuple(val) if isinstance(val, list) else val
        return cls(**kwargs)


# canonical shapes used by the CLI; all fit inside the unit ball
def named_shape(name: str) -> AnalyticShape:
    if name == "sphere":
        return AnalyticShape("sphere", radius=1.0, albedo=(0.8, 0.25, 0.25))
    if name == "box":
        return AnalyticShape("box", half_extents=(0.55, 0.45, 0.6),
                             albedo=(0.25, 0.55, 0.8))
    if name == "torus":
        return AnalyticShape("torus", radius=0.7, tube_radius=0.25,
                             albedo=(0.3, 0.7, 0.35))
    if name == "two-spheres":
        return AnalyticShape("union", children=[
            AnalyticShape("sphere", center=(-0.4, 0.0, 0.0), radius=0.55,
                          albedo=(0.8, 0.25, 0.25)),
            AnalyticShape("sphere", center=(0.4, 0.0, 0.0), radius=0.55,
                          albedo=(0.25, 0.55, 0.8)),
        ])
    raise ValueError(f"unknown shape name {name!r}; "
                     "expected sphere, box, torus or two-spheres")


def sdf_eval(shape: AnalyticShape, points) -> np.ndarray:
    """Signed distance at one point (scalar) or a batch (array)."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    kinds, params, _ = shape.flatten()
    out = _kernels.sdf_values(kinds, params, pts.reshape(-1, 3))
    return float(out[0]) if single else out


def sdf_gradient(shape: AnalyticShape, points, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of the signed distance."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    g = np.empty_like(pts)
    for a in range(3):
        offset = np.zeros(3)
        offset[a] = h
        g[:, a] = (sdf_eval(shape, pts + offset) - sdf_eval(shape, pts - offset)) / (2 * h)
    return g[0] if single else g


def sdf_normal(shape: AnalyticShape, points, h: float = 1e-4) -> np.ndarray:
    g = sdf_gradient(shape, points, h)
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    return g / np.maximum(norms, 1e-12)


def nearest_primitive(shape: AnalyticShape, points) -> np.ndarray:
    """Index of the closest primitive at each point (albedo selection)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    kinds, params, _ = shape.flatten()
    best = np.full(pts.shape[0], np.inf)
    idx = np.zeros(pts.shape[0], dtype=np.int64)
    for k in range(len(kinds)):
        d = _kernels.sdf_values(kinds[k:k + 1], params[k:k + 1], pts)
        closer = d < best
        best[closer] = d[closer]
        idx[closer] = k
    return idx


def sphere_trace(shape: AnalyticShape, origin, direction, t_bounds,
                 tol: float = 1e-5, max_steps: int = 256):
    """Smallest t in bounds with |sdf| < tol, or None for a miss."""
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
        raise ValueError("ray direction must be normalized")
    kinds, params, _ = shape.flatten()
    t = _kernels.sphere_trace(kinds, params,
                              np.asarray(origin, dtype=np.float64).reshape(1, 3),
                              direction.reshape(1, 3),
                              t_bounds[0], t_bounds[1], tol, max_steps)[0]
    return None if t < 0 else float(t)


def sphere_trace_batch(shape: AnalyticShape, origins, dirs, t_near, t_far,
                       tol: float = 1e-5, max_steps: int = 256) -> np.ndarray:
    """Vectorized tracing; -1.0 marks misses."""
    kinds, params, _ = shape.flatten()
    return _kernels.sphere_trace(kinds, params, origins, dirs, t_near, t_far,
                                 tol, max_steps)


def sample_gt_surface(shape: AnalyticShape, n_points: int, seed: int,
                      tol: float = 1e-6, max_rounds: int = 40):
    """Point cloud with outward normals on the zero level set.

    Uniform box samples are projected onto the surface by damped Newton
    steps along the distance gradient; points that fail to reach |sdf| < tol
    are rejected and redrawn.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = shape.bounds(pad=0.05)
    points = []
    total = 0
    for _ in range(max_rounds):
        need = n_points - total
        if need <= 0:
            break
        cand = rng.uniform(lo, hi, size=(max(4 * need, 64), 3))
        for _ in range(24):
            d = sdf_eval(shape, cand)
            if np.all(np.abs(d) < tol):
                break
            g = sdf_normal(shape, cand)
            cand = cand - d[:, None] * g
        d = sdf_eval(shape, cand)
        good = cand[np.abs(d) < tol]
        if good.shape[0]:
            points.append(good[:need])
            total += min(need, good.shape[0])
    if total < n_points:
        raise RuntimeError(f"surface sampling stalled at {total}/{n_points} points")
    pts = np.concatenate(points, axis=0)[:n_points]
    normals = sdf_normal(shape, pts)
    return pts, normals
