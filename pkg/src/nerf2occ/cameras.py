"""Pinhole cameras: projection, ray generation, ring placement.

Conventions: camera space is +x right, +y down, +z forward; `uv` is in pixel
index units with integer coordinates at pixel centers, so the principal
point (cx, cy) defaults to ((w-1)/2, (h-1)/2). Depth values elsewhere in the
pipeline are along-ray distances, not camera-space z.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray  # 4x4, rigid
    width: int
    height: int

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or not np.isclose(np.linalg.det(r), 1.0, atol=1e-6):
            raise ValueError("world_to_camera rotation is not a proper rotation")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width - 1 and 0 <= self.cy <= self.height - 1):
            raise ValueError("principal point must lie inside the image")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera origin in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        """World-space optical axis (+z row of the rotation)."""
        return self.rotation[2]

    def to_dict(self) -> dict:
        return {
            "intrinsics": [self.fx, self.fy, self.cx, self.cy],
            "world_to_camera": [float(v) for v in self.world_to_camera.reshape(-1)],
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        fx, fy, cx, cy = d["intrinsics"]
        return cls(fx, fy, cx, cy,
                   np.asarray(d["world_to_camera"], dtype=np.float64).reshape(4, 4),
                   int(d["width"]), int(d["height"]))


def project(points, camera: Camera):
    """Pinhole projection of world points.

    Returns (uv, z, in_front): pixel coordinates, camera-space depth, and a
    flag that is False when z <= 1e-6 (uv is unreliable there).
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    cam = pts @ camera.rotation.T + camera.translation
    z = cam[:, 2]
    in_front = z > 1e-6
    safe_z = np.where(in_front, z, 1.0)
    u = camera.fx * cam[:, 0] / safe_z + camera.cx
    v = camera.fy * cam[:, 1] / safe_z + camera.cy
    uv = np.stack([u, v], axis=1)
    if single:
        return uv[0], float(z[0]), bool(in_front[0])
    return uv, z, in_front


def gen_rays(camera: Camera, pixels):
    """World-space rays through the centers of the given (u, v) pixels."""
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if np.any(px[:, 0] < 0) or np.any(px[:, 0] > camera.width - 1) or \
       np.any(px[:, 1] < 0) or np.any(px[:, 1] > camera.height - 1):
        raise ValueError("pixel coordinates outside the image")
    d_cam = np.stack([(px[:, 0] - camera.cx) / camera.fx,
                      (px[:, 1] - camera.cy) / camera.fy,
                      np.ones(px.shape[0])], axis=1)
    d_world = d_cam @ camera.rotation  # == R^T applied to each row
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.center, d_world.shape).copy()
    return origins, d_world


def all_pixels(camera: Camera) -> np.ndarray:
    """Every (u, v) pixel of the image in row-major order."""
    u, v = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    return np.stack([u.reshape(-1), v.reshape(-1)], axis=1)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera rigid transform for a camera at `eye` facing `target`."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-8:  # looking straight along `up`
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        nr = np.linalg.norm(right)
    right /= nr
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=0)
    w2c = np.eye(4)
    w2c[:3, :3] = rot
    w2c[:3, 3] = -rot @ eye
    return w2c


def ring_camera(index: int, n_views: int, radius: float, size: int,
                elevation_deg: float = 20.0, fov_deg: float = 50.0,
                target=(0.0, 0.0, 0.0), phase: float = 0.0) -> Camera:
    """Camera `index` of an evenly spaced ring looking at `target`."""
    az = phase + 2.0 * np.pi * index / n_views
    el = np.deg2rad(elevation_deg)
    eye = np.array([radius * np.cos(el) * np.cos(az),
                    radius * np.cos(el) * np.sin(az),
                    radius * np.sin(el)])
    focal = 0.5 * size / np.tan(0.5 * np.deg2rad(fov_deg))
    c = (size - 1) / 2.0
    return Camera(focal, focal, c, c, look_at(eye, target), size, size)
