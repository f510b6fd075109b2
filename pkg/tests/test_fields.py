import numpy as np
import pytest

from nerf2occ import autodiff as ad
from nerf2occ import cameras as cam
from nerf2occ import fields, shapes, synth
from nerf2occ.autodiff import Tensor
from nerf2occ.fields import FieldBundle, ModelConfig, posenc, sample_bilinear


def tiny_scene(size=12, n_views=3, shape_name="sphere", seed=0):
    shape = shapes.named_shape(shape_name)
    cams = [cam.ring_camera(i, n_views, 3.0, size) for i in range(n_views)]
    images, depths = [], []
    for c in cams:
        img, dep = synth.render_view(shape, c)
        images.append(img)
        depths.append(dep)
    rng = np.random.default_rng(seed)
    pts, normals = shapes.sample_gt_surface(shape, 64, seed=seed)
    return synth.MultiViewScene(images=images, depths=depths, cameras=cams,
                                near=0.5, far=5.0, shape=shape,
                                gt_points=pts, gt_normals=normals)


class TestPosenc:
    def test_zero_input(self):
        out = posenc(np.zeros(3), 6)
        assert out.shape == (36,)
        sin_part = out.reshape(6, 2, 3)[:, 0, :]
        cos_part = out.reshape(6, 2, 3)[:, 1, :]
        np.testing.assert_array_equal(sin_part, 0.0)
        np.testing.assert_array_equal(cos_part, 1.0)

    def test_output_length(self):
        assert posenc(np.zeros((5, 3)), 6).shape == (5, 36)

    def test_band0_periodicity(self):
        x = np.array([[0.3, -0.6, 1.4]])
        a = posenc(x, 1)
        b = posenc(x + 2.0, 1)
        np.testing.assert_allclose(a, b, atol=1e-9)


class TestBilinear:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.image = rng.uniform(size=(5, 7, 3)).astype(np.float32)

    def test_pixel_center(self):
        rgb, valid = sample_bilinear(self.image, [4.0, 2.0])
        assert valid
        np.testing.assert_allclose(rgb, self.image[2, 4], rtol=1e-6)

    def test_midpoint_average(self):
        rgb, _ = sample_bilinear(self.image, [3.5, 1.0])
        expected = 0.5 * (self.image[1, 3] + self.image[1, 4])
        np.testing.assert_allclose(rgb, expected, rtol=1e-6)

    def test_constant_image(self):
        const = np.full((4, 4, 3), 0.25)
        rgb, valid = sample_bilinear(const, np.array([[0.1, 0.2], [2.7, 3.0], [3.0, 0.0]]))
        assert valid.all()
        np.testing.assert_allclose(rgb, 0.25, rtol=1e-12)

    def test_out_of_image_invalid_and_zero(self):
        rgb, valid = sample_bilinear(self.image, np.array([[-0.5, 2.0], [6.5, 2.0], [2.0, 8.0]]))
        assert not valid.any()
        np.testing.assert_array_equal(rgb, 0.0)


class TestEncode:
    def test_constant_views_have_zero_variance(self):
        scene = tiny_scene()
        for i in range(scene.n_views):
            scene.images[i] = np.full_like(scene.images[i], 0.5)
        pts = np.array([[0.0, 0.0, 0.0], [0.3, 0.1, -0.2]])
        stats = fields.pooled_view_stats(pts, scene)
        np.testing.assert_allclose(stats[:, 0:3], 0.5, atol=1e-7)
        np.testing.assert_allclose(stats[:, 3:6], 0.0, atol=1e-7)
        np.testing.assert_allclose(stats[:, 6], 1.0)

    def test_feature_dim_matches_config(self):
        scene = tiny_scene()
        bundle = FieldBundle(ModelConfig(), seed=1)
        feat = bundle.encode(np.zeros((4, 3)), scene)
        assert feat.shape == (4, 64)

    def test_view_permutation_invariance(self):
        scene = tiny_scene()
        bundle = FieldBundle(ModelConfig(), seed=1)
        pts = np.random.default_rng(5).uniform(-0.5, 0.5, size=(6, 3))
        f1 = bundle.encode(pts, scene).data
        perm = synth.MultiViewScene(images=scene.images[::-1], depths=scene.depths[::-1],
                                    cameras=scene.cameras[::-1], near=scene.near,
                                    far=scene.far, shape=scene.shape,
                                    gt_points=scene.gt_points, gt_normals=scene.gt_normals)
        f2 = bundle.encode(pts, perm).data
        np.testing.assert_allclose(f1, f2, atol=1e-6)

    def test_point_behind_all_cameras_gets_zero_stats(self):
        scene = tiny_scene()
        far_point = np.array([[50.0, 50.0, 50.0]])
        stats = fields.pooled_view_stats(far_point, scene)
        np.testing.assert_array_equal(stats[0], 0.0)


class TestDecoders:
    def setup_method(self):
        self.bundle = FieldBundle(ModelConfig(), seed=2)
        rng = np.random.default_rng(0)
        self.features = Tensor(rng.normal(size=(1000, 64)).astype(np.float32))

    def test_occupancy_strictly_in_unit_interval(self):
        o = self.bundle.decode_occupancy(self.features).data
        assert np.all(o > 0) and np.all(o < 1)

    def test_sigma_nonnegative(self):
        s = self.bundle.decode_sigma(self.features).data
        assert np.all(s >= 0)

    def test_color_in_unit_cube(self):
        dirs = np.random.default_rng(1).normal(size=(1000, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        c = self.bundle.decode_color(self.features, dirs).data
        assert np.all(c >= 0) and np.all(c <= 1)

    def test_color_ignores_direction_when_branch_zeroed(self):
        w0 = self.bundle.color.layers[0][0]
        w0.data[64:, :] = 0.0  # rows multiplying the direction encoding
        rng = np.random.default_rng(2)
        d1 = rng.normal(size=(1000, 3))
        d1 /= np.linalg.norm(d1, axis=1, keepdims=True)
        d2 = rng.normal(size=(1000, 3))
        d2 /= np.linalg.norm(d2, axis=1, keepdims=True)
        c1 = self.bundle.decode_color(self.features, d1).data
        c2 = self.bundle.decode_color(self.features, d2).data
        np.testing.assert_array_equal(c1, c2)

    def test_occupancy_bias_gives_empty_prior(self):
        scene = tiny_scene()
        bundle = FieldBundle(ModelConfig(), seed=3)
        pts = np.random.default_rng(4).uniform(-1, 1, size=(100, 3))
        occ = bundle.occupancy_at(pts, scene)
        assert occ.mean() < 0.35


def test_projection_of_traced_hits_consistent_with_depth():
    """Hit points found by tracing project onto pixels whose stored depth
    reconstructs the same point."""
    scene = tiny_scene(size=24)
    shape = scene.shape
    camera = scene.cameras[0]
    pixels = np.array([[8.0, 12.0], [12.0, 12.0], [11.0, 9.0]])
    origins, dirs = cam.gen_rays(camera, pixels)
    t = shapes.sphere_trace_batch(shape, origins, dirs, scene.near, scene.far)
    assert (t > 0).all()
    hits = origins + t[:, None] * dirs
    uv, z, in_front = cam.project(hits, camera)
    assert in_front.all()
    np.testing.assert_allclose(uv, pixels, atol=1e-6)
    # along-ray depth at those exact pixels equals the traced t
    depth = scene.depths[0][pixels[:, 1].astype(int), pixels[:, 0].astype(int)]
    np.testing.assert_allclose(depth, t, atol=1e-5)


def test_encode_decode_chain_grad_check():
    """End-to-end differentiability: occupancy-through-encoder loss vs FD."""
    scene = tiny_scene(size=8)
    ad.set_default_dtype(np.float64)
    try:
        cfg = ModelConfig(pos_bands=2, dir_bands=1, encoder_width=6,
                          encoder_layers=1, decoder_width=6, decoder_layers=1,
                          feature_dim=6)
        bundle = FieldBundle(cfg, seed=5, dtype=np.float64)
        pts = np.random.default_rng(6).uniform(-0.8, 0.8, size=(5, 3))

        def loss():
            occ = bundle.decode_occupancy(bundle.encode(pts, scene))
            return ad.tsum(ad.square(occ))

        err = ad.grad_check_params(loss, bundle.parameters().values(), step=1e-5)
        assert err < 1e-4
    finally:
        ad.set_default_dtype(np.float32)
