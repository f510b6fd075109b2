import numpy as np

from nerf2occ import cameras as cam
from nerf2occ import shapes, synth


def tiny_scene(size=12, n_views=3, shape_name="sphere", seed=0, n_gt=64):
    """Small in-memory scene (no disk round trip) for unit tests."""
    shape = shapes.named_shape(shape_name)
    cams = [cam.ring_camera(i, n_views, 3.0, size) for i in range(n_views)]
    images, depths = [], []
    for c in cams:
        img, dep = synth.render_view(shape, c)
        images.append(img)
        depths.append(dep)
    pts, normals = shapes.sample_gt_surface(shape, n_gt, seed=seed)
    return synth.MultiViewScene(images=images, depths=depths, cameras=cams,
                                near=0.5, far=5.0, shape=shape,
                                gt_points=pts, gt_normals=normals)
