import numpy as np
import pytest
from conftest import tiny_scene

from nerf2occ import autodiff as ad
from nerf2occ import cameras as cam
from nerf2occ import renderer, shapes
from nerf2occ.autodiff import Tensor
from nerf2occ.fields import FieldBundle, ModelConfig
from nerf2occ.renderer import (SamplingConfig, alpha_from_sigma, composite,
                               importance_sample, render_pixel, render_rays,
                               stratified_sample)


class TestStratified:
    def test_bin_centers_without_jitter(self):
        ts = stratified_sample(0.0, 1.0, 4, 1, jitter=False, rng=None)
        np.testing.assert_allclose(ts[0], [0.125, 0.375, 0.625, 0.875])

    def test_all_samples_in_bounds(self):
        rng = np.random.default_rng(0)
        ts = stratified_sample(0.5, 5.0, 96, 16, jitter=True, rng=rng)
        assert ts.min() >= 0.5 and ts.max() <= 5.0
        assert np.all(np.diff(ts, axis=1) > 0)

    def test_seeded_reproducibility(self):
        a = stratified_sample(0.5, 5.0, 8, 4, True, np.random.default_rng(42))
        b = stratified_sample(0.5, 5.0, 8, 4, True, np.random.default_rng(42))
        assert np.array_equal(a, b)

    def test_too_few_rejected(self):
        with pytest.raises(ValueError):
            stratified_sample(0.0, 1.0, 1, 1, False, None)


class TestImportance:
    def test_one_hot_concentrates_fine_samples(self):
        n_coarse, n_fine = 8, 16
        coarse = stratified_sample(0.0, 1.0, n_coarse, 1, False, None)
        weights = np.zeros((1, n_coarse))
        weights[0, 3] = 1.0
        lo, hi = 3 / n_coarse, 4 / n_coarse
        for seed in range(10):
            merged = importance_sample(coarse, weights, 0.0, 1.0, n_fine,
                                       np.random.default_rng(seed))
            fine = np.setdiff1d(merged[0], coarse[0])
            assert fine.size == n_fine
            assert np.all((fine >= lo) & (fine <= hi)), f"seed {seed}"

    def test_uniform_weights_uniform_histogram(self):
        n_coarse = 8
        n_draws = 10_000
        coarse = stratified_sample(0.0, 1.0, n_coarse, 1, False, None)
        weights = np.ones((1, n_coarse))
        rng = np.random.default_rng(7)
        counts = np.zeros(n_coarse)
        done = 0
        while done < n_draws:
            take = min(64, n_draws - done)
            merged = importance_sample(coarse, weights, 0.0, 1.0, take, rng)
            fine = np.setdiff1d(merged[0], coarse[0])
            counts += np.histogram(fine, bins=n_coarse, range=(0.0, 1.0))[0]
            done += take
        expect = n_draws / n_coarse
        sigma = np.sqrt(n_draws * (1 / n_coarse) * (1 - 1 / n_coarse))
        assert np.all(np.abs(counts - expect) < 3 * sigma)

    def test_output_size_and_sorted(self):
        rng = np.random.default_rng(1)
        coarse = stratified_sample(0.5, 5.0, 96, 3, True, rng)
        weights = rng.uniform(size=(3, 96))
        merged = importance_sample(coarse, weights, 0.5, 5.0, 32, rng)
        assert merged.shape == (3, 128)
        assert np.all(np.diff(merged, axis=1) >= 0)

    def test_negative_weights_rejected(self):
        coarse = stratified_sample(0.0, 1.0, 4, 1, False, None)
        with pytest.raises(ValueError):
            importance_sample(coarse, np.array([[0.2, -0.1, 0.5, 0.1]]), 0.0, 1.0,
                              4, np.random.default_rng(0))


class TestAlpha:
    def test_zero_sigma(self):
        out = alpha_from_sigma(Tensor(np.zeros((1, 1))), np.ones((1, 1)))
        assert out.data[0, 0] == 0.0

    def test_saturation(self):
        out = alpha_from_sigma(Tensor(np.full((1, 1), 1e8)), np.ones((1, 1)))
        assert out.data[0, 0] == pytest.approx(1.0)

    def test_analytic_value(self):
        out = alpha_from_sigma(Tensor(np.array([[2.0]])), np.array([[0.5]]))
        assert out.data[0, 0] == pytest.approx(1.0 - np.exp(-1.0), rel=1e-12)


class TestComposite:
    def test_opaque_first_sample(self):
        alphas = Tensor(np.array([[1.0, 0.7, 0.3]]))
        colors = Tensor(np.array([[[0.2, 0.4, 0.6], [1, 0, 0], [0, 1, 0]]]))
        out = composite(alphas, colors, np.array([[1.0, 2.0, 3.0]]))
        np.testing.assert_array_equal(out.weights.data, [[1.0, 0.0, 0.0]])
        np.testing.assert_array_equal(out.color.data, [[0.2, 0.4, 0.6]])

    def test_vacuum(self):
        alphas = Tensor(np.zeros((1, 4)))
        colors = Tensor(np.ones((1, 4, 3)))
        out = composite(alphas, colors, np.linspace(0, 1, 4).reshape(1, 4))
        np.testing.assert_array_equal(out.color.data, 0.0)
        np.testing.assert_array_equal(out.acc.data, 0.0)
        np.testing.assert_array_equal(out.trans.data, 1.0)

    def test_occupancy_equals_density_compositing_bitwise(self):
        """One shared formula: same per-sample values give the same output."""
        rng = np.random.default_rng(3)
        vals = rng.uniform(0, 1, size=(5, 16))
        colors = rng.uniform(0, 1, size=(5, 16, 3))
        ts = np.sort(rng.uniform(0.5, 5.0, size=(5, 16)), axis=1)
        as_density = composite(Tensor(vals.copy()), Tensor(colors.copy()), ts.copy())
        as_occupancy = composite(Tensor(vals.copy()), Tensor(colors.copy()), ts.copy())
        assert np.array_equal(as_density.color.data, as_occupancy.color.data)
        assert np.array_equal(as_density.weights.data, as_occupancy.weights.data)

    def test_constant_sigma_matches_closed_form(self):
        """Accumulated opacity of a constant-density ray approaches
        1 - exp(-sigma * L)."""
        sigma, length, n = 1.3, 2.0, 4096
        ts = stratified_sample(0.0, length, n, 1, False, None)
        delta = renderer.deltas(ts, 0.0, length)
        alphas = alpha_from_sigma(Tensor(np.full((1, n), sigma)), delta)
        out = composite(alphas, Tensor(np.ones((1, n, 3))), ts)
        expected = 1.0 - np.exp(-sigma * length)
        assert abs(out.acc.item() - expected) < 1e-3

    def test_telescoping_identity(self):
        """sum_i w_i + T_N = 1 with T_N = T_{N-1} * (1 - a_{N-1})."""
        rng = np.random.default_rng(11)
        alphas = rng.uniform(0, 1, size=(10_000, 24)).astype(np.float32)
        colors = np.ones((10_000, 24, 3), dtype=np.float32)
        ts = np.sort(rng.uniform(0.5, 5.0, size=(10_000, 24)), axis=1)
        out = composite(Tensor(alphas), Tensor(colors), ts)
        t_last = out.trans.data[:, -1] * (1.0 - alphas[:, -1])
        total = out.acc.data + t_last
        assert np.max(np.abs(total - 1.0)) < 1e-5

    def test_weights_nonnegative_transmittance_nonincreasing(self):
        rng = np.random.default_rng(5)
        alphas = rng.uniform(0, 1, size=(100, 32))
        out = composite(Tensor(alphas), Tensor(rng.uniform(size=(100, 32, 3))),
                        np.sort(rng.uniform(0.5, 5.0, size=(100, 32)), axis=1))
        assert np.all(out.weights.data >= 0)
        assert np.all(np.diff(out.trans.data, axis=1) <= 1e-12)
        assert np.all(out.acc.data <= 1 + 1e-5)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            composite(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 4, 3))),
                      np.zeros((1, 4)))

    def test_composite_grad_check(self):
        """Gradients w.r.t. alphas and colors vs finite differences."""
        rng = np.random.default_rng(9)
        a0 = rng.uniform(0.05, 0.95, size=(2, 6))
        c0 = rng.uniform(0.1, 0.9, size=(2, 6, 3))
        ts = np.sort(rng.uniform(0.5, 5.0, size=(2, 6)), axis=1)
        coeff = rng.normal(size=(2, 3))

        def loss_alpha(a):
            out = composite(a, Tensor(c0), ts)
            return ad.add(ad.tsum(ad.mul(out.color, Tensor(coeff))),
                          ad.tsum(out.depth))

        err = ad.grad_check(loss_alpha, Tensor(a0), step=1e-6)
        assert err < 1e-4

        def loss_color(c):
            out = composite(Tensor(a0), c, ts)
            return ad.tsum(ad.mul(out.color, Tensor(coeff)))

        err = ad.grad_check(loss_color, Tensor(c0), step=1e-6)
        assert err < 1e-4


class TestRenderRays:
    def setup_method(self):
        self.scene = tiny_scene(size=10)
        self.bundle = FieldBundle(ModelConfig(pos_bands=2, dir_bands=1,
                                              encoder_width=8, decoder_width=8,
                                              feature_dim=8), seed=4)
        self.cfg = SamplingConfig(n_coarse=16, n_fine=8, jitter=True)

    def test_zero_density_renders_background(self):
        # silence the density head: large negative softplus pre-activation
        self.bundle.sigma.layers[-1][0].data[:] = 0.0
        self.bundle.sigma.layers[-1][1].data[:] = -60.0
        origins, dirs = cam.gen_rays(self.scene.cameras[0], [[5.0, 5.0]])
        out = render_pixel(origins[0], dirs[0], self.scene, self.bundle,
                           "density", self.cfg, np.random.default_rng(0))
        np.testing.assert_allclose(out.color.data, [[1.0, 1.0, 1.0]], atol=1e-6)

    def test_modes_share_sample_positions(self):
        origins, dirs = cam.gen_rays(self.scene.cameras[0], [[4.0, 5.0], [6.0, 5.0]])
        outs = render_rays(self.scene, self.bundle, origins, dirs, self.cfg,
                           np.random.default_rng(1), modes=("density", "occupancy"))
        assert np.array_equal(outs["density"].ts, outs["occupancy"].ts)
        assert outs["density"].ts.shape == (2, 24)

    def test_bitwise_determinism(self):
        origins, dirs = cam.gen_rays(self.scene.cameras[1], [[3.0, 3.0], [7.0, 6.0]])

        def run():
            return render_rays(self.scene, self.bundle, origins, dirs, self.cfg,
                               np.random.default_rng(123), modes=("density",))["density"]

        a, b = run(), run()
        assert np.array_equal(a.color.data, b.color.data)
        assert np.array_equal(a.ts, b.ts)
        assert np.array_equal(a.weights.data, b.weights.data)

    def test_unproject_gt_depth_reproduces_trace_hit(self):
        scene = tiny_scene(size=16)
        camera = scene.cameras[0]
        depth = scene.depths[0]
        vs, us = np.nonzero(depth != -1.0)
        pick = [(us[0], vs[0]), (us[len(us) // 2], vs[len(vs) // 2])]
        for u, v in pick:
            origins, dirs = cam.gen_rays(camera, [[float(u), float(v)]])
            t_hit = shapes.sphere_trace(scene.shape, origins[0], dirs[0],
                                        (scene.near, scene.far))
            recon = origins[0] + float(depth[v, u]) * dirs[0]
            expected = origins[0] + t_hit * dirs[0]
            np.testing.assert_allclose(recon, expected, atol=1e-3)
