"""Synthetic multi-view datasets from analytic signed-distance scenes.

A scene directory holds `view_###.ppm` (binary 8-bit PPM), `depth_###.bin`
(little-endian float32, row-major, -1.0 = no hit), `cameras.json`,
`bounds.json`, `gt_points.ply` (ascii: x y z nx ny nz) and `shape.json`
(the analytic scene, kept so held-out ground-truth views can be rendered
on demand).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import cameras as cam
from . import shapes
from .cameras import Camera
from .shapes import AnalyticShape

DEPTH_SENTINEL = -1.0
BACKGROUND = np.array([1.0, 1.0, 1.0])
AMBIENT = 0.1
DEFAULT_LIGHT = (0.45, 0.3, 0.85)
DEFAULT_NEAR = 0.5
DEFAULT_FAR = 5.0


@dataclass
class MultiViewScene:
    images: list          # (h, w, 3) float32 in [0, 1]
    depths: list          # (h, w) float32, DEPTH_SENTINEL for background
    cameras: list         # Camera
    near: float
    far: float
    shape: AnalyticShape | None
    gt_points: np.ndarray
    gt_normals: np.ndarray
    light_dir: tuple = DEFAULT_LIGHT

    @property
    def n_views(self) -> int:
        return len(self.images)

    def foreground_mask(self, view: int) -> np.ndarray:
        return self.depths[view] != DEPTH_SENTINEL


# ---------------------------------------------------------------------------
# file formats


def write_ppm(path, image: np.ndarray) -> None:
    """8-bit binary PPM from a float image in [0, 1]."""
    h, w = image.shape[:2]
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P6":
            raise ValueError(f"{path}: not a binary PPM file")
        w, h = (int(v) for v in f.readline().split())
        maxval = int(f.readline())
        if maxval != 255:
            raise ValueError(f"{path}: only 8-bit PPM is supported")
        raw = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    return (raw.reshape(h, w, 3).astype(np.float32)) / 255.0


def write_depth(path, depth: np.ndarray) -> None:
    depth.astype("<f4").tofile(path)


def read_depth(path, width: int, height: int) -> np.ndarray:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != width * height:
        raise ValueError(f"{path}: expected {width * height} depth values, found {raw.size}")
    return raw.reshape(height, width)


def write_ply(path, points: np.ndarray, normals: np.ndarray) -> None:
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {points.shape[0]}\n")
        for name in ("x", "y", "z", "nx", "ny", "nz"):
            f.write(f"property float {name}\n")
        f.write("end_header\n")
        for p, n in zip(points, normals):
            f.write("%.8f %.8f %.8f %.8f %.8f %.8f\n" % (p[0], p[1], p[2], n[0], n[1], n[2]))


def read_ply(path):
    with open(path) as f:
        line = f.readline().strip()
        if line != "ply":
            raise ValueError(f"{path}: not a PLY file")
        n_vertices = None
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: missing end_header")
            line = line.strip()
            if line.startswith("element vertex"):
                n_vertices = int(line.split()[-1])
            elif line == "end_header":
                break
        rows = np.loadtxt(f, dtype=np.float64, ndmin=2)
    if n_vertices is None or rows.shape != (n_vertices, 6):
        raise ValueError(f"{path}: malformed vertex data")
    return rows[:, :3], rows[:, 3:]


# ---------------------------------------------------------------------------
# rendering and dataset generation


def render_view(shape: AnalyticShape, camera: Camera, light_dir=DEFAULT_LIGHT,
                near: float = DEFAULT_NEAR, far: float = DEFAULT_FAR):
    """Ground-truth (image, depth) by per-pixel sphere tracing.

    Shading is Lambertian with a fixed ambient term; background pixels are
    white with depth DEPTH_SENTINEL. Depth is the along-ray distance.
    """
    light = np.asarray(light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    pixels = cam.all_pixels(camera)
    origins, dirs = cam.gen_rays(camera, pixels)
    t = shapes.sphere_trace_batch(shape, origins, dirs, near, far)
    hit = t >= 0

    image = np.tile(BACKGROUND, (pixels.shape[0], 1))
    depth = np.full(pixels.shape[0], DEPTH_SENTINEL)
    if hit.any():
        pts = origins[hit] + t[hit, None] * dirs[hit]
        normals = shapes.sdf_normal(shape, pts)
        _, _, albedos = shape.flatten()
        alb = albedos[shapes.nearest_primitive(shape, pts)]
        lambert = np.maximum(normals @ light, 0.0)
        image[hit] = np.clip(alb * lambert[:, None] + AMBIENT, 0.0, 1.0)
        depth[hit] = t[hit]
    h, w = camera.height, camera.width
    return (image.reshape(h, w, 3).astype(np.float32),
            depth.reshape(h, w).astype(np.float32))


def make_dataset(shape: AnalyticShape, n_views: int, size: int, out_dir: str,
                 seed: int = 0, ring_radius: float = 3.0,
                 elevation_deg: float = 20.0, fov_deg: float = 50.0,
                 near: float = DEFAULT_NEAR, far: float = DEFAULT_FAR,
                 light_dir=DEFAULT_LIGHT, n_gt_points: int = 10000) -> str:
    """Render and write a complete scene directory; deterministic per seed."""
    if n_views < 2:
        raise ValueError("need at least 2 views")
    os.makedirs(out_dir, exist_ok=True)

    cams = [cam.ring_camera(i, n_views, ring_radius, size, elevation_deg, fov_deg)
            for i in range(n_views)]
    for i, camera in enumerate(cams):
        image, depth = render_view(shape, camera, light_dir, near, far)
        write_ppm(os.path.join(out_dir, f"view_{i:03d}.ppm"), image)
        write_depth(os.path.join(out_dir, f"depth_{i:03d}.bin"), depth)

    with open(os.path.join(out_dir, "cameras.json"), "w") as f:
        json.dump([c.to_dict() for c in cams], f, indent=1, sort_keys=True)
    with open(os.path.join(out_dir, "bounds.json"), "w") as f:
        json.dump({"near": near, "far": far}, f, indent=1, sort_keys=True)
    with open(os.path.join(out_dir, "shape.json"), "w") as f:
        json.dump({"shape": shape.to_dict(),
                   "light_dir": list(np.asarray(light_dir, dtype=float)),
                   "ring_radius": ring_radius, "elevation_deg": elevation_deg,
                   "fov_deg": fov_deg, "seed": seed},
                  f, indent=1, sort_keys=True)

    pts, normals = shapes.sample_gt_surface(shape, n_gt_points, seed)
    write_ply(os.path.join(out_dir, "gt_points.ply"), pts, normals)
    return out_dir


def load_scene(scene_dir: str) -> MultiViewScene:
    with open(os.path.join(scene_dir, "cameras.json")) as f:
        cams = [Camera.from_dict(d) for d in json.load(f)]
    with open(os.path.join(scene_dir, "bounds.json")) as f:
        bounds = json.load(f)

    images, depths = [], []
    for i, camera in enumerate(cams):
        images.append(read_ppm(os.path.join(scene_dir, f"view_{i:03d}.ppm")))
        depths.append(read_depth(os.path.join(scene_dir, f"depth_{i:03d}.bin"),
                                 camera.width, camera.height))

    shape = None
    light = DEFAULT_LIGHT
    meta_path = os.path.join(scene_dir, "shape.json")
    if os.path.exists(meta_path):
        with open(meta_path) as f:
            meta = json.load(f)
        shape = AnalyticShape.from_dict(meta["shape"])
        light = tuple(meta.get("light_dir", DEFAULT_LIGHT))

    pts, normals = read_ply(os.path.join(scene_dir, "gt_points.ply"))
    return MultiViewScene(images=images, depths=depths, cameras=cams,
                          near=float(bounds["near"]), far=float(bounds["far"]),
                          shape=shape, gt_points=pts, gt_normals=normals,
                          light_dir=light)


def scene_metadata(scene_dir: str) -> dict:
    with open(os.path.join(scene_dir, "shape.json")) as f:
        return json.load(f)


def held_out_camera(scene_dir: str, size: int | None = None) -> Camera:
    """A validation camera between the first two ring positions."""
    meta = scene_metadata(scene_dir)
    with open(os.path.join(scene_dir, "cameras.json")) as f:
        n_views = len(json.load(f))
    with open(os.path.join(scene_dir, "cameras.json")) as f:
        width = json.load(f)[0]["width"]
    return cam.ring_camera(0, n_views, meta["ring_radius"], size or width,
                           meta["elevation_deg"], meta["fov_deg"],
                           phase=np.pi / n_views)
