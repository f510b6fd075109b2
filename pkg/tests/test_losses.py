import numpy as np
import pytest

from nerf2occ import autodiff as ad
from nerf2occ import losses
from nerf2occ.autodiff import Tensor
from nerf2occ.losses import (LossWeights, WidthSchedule, gaussian_weight_target,
                             loss_bootstrap, loss_depth, loss_normal,
                             loss_normal_batch, loss_vol, loss_weight,
                             loss_weight_batch, schedule_width, total_loss)


class TestLossVol:
    def test_identical_colors(self):
        out = loss_vol(Tensor(np.array([[0.3, 0.5, 0.7]])), [[0.3, 0.5, 0.7]])
        assert out.data[0] == 0.0

    def test_unit_difference(self):
        out = loss_vol(Tensor(np.array([[1.0, 0.0, 0.0]])), [[0.0, 0.0, 0.0]])
        assert out.data[0] == pytest.approx(1.0)

    def test_sqrt3(self):
        out = loss_vol(Tensor(np.array([[1.0, 1.0, 1.0]])), [[0.0, 0.0, 0.0]])
        assert out.data[0] == pytest.approx(np.sqrt(3.0), rel=1e-6)


class TestLossBootstrap:
    def test_matching(self):
        o = Tensor(np.array([[0.2, 0.8, 0.5]]))
        assert loss_bootstrap(o, [[0.2, 0.8, 0.5]]).data[0] == 0.0

    def test_single_unit_gap(self):
        assert loss_bootstrap(Tensor(np.array([[1.0]])), [[0.0]]).data[0] == 1.0

    def test_two_quarter_gaps(self):
        out = loss_bootstrap(Tensor(np.array([[0.5, 0.5]])), [[0.0, 1.0]])
        assert out.data[0] == pytest.approx(0.5)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            loss_bootstrap(Tensor(np.zeros((1, 3))), np.zeros((1, 4)))


class TestSchedule:
    def test_at_zero(self):
        assert schedule_width(0, WidthSchedule()) == 1.0

    def test_floor(self):
        assert schedule_width(10 ** 6, WidthSchedule()) == pytest.approx(0.04)

    def test_analytic_point(self):
        a = schedule_width(1000, WidthSchedule(beta=0.001))
        assert a == pytest.approx(np.exp(-1.0), rel=1e-9)

    def test_monotone_and_bounded(self):
        ws = WidthSchedule()
        vals = [schedule_width(k, ws) for k in range(0, 20000, 250)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))
        assert all(ws.a_min <= v <= ws.a_max for v in vals)

    def test_alternative_floor_configurable(self):
        assert schedule_width(10 ** 7, WidthSchedule(a_min=0.004)) == pytest.approx(0.004)

    def test_invalid(self):
        with pytest.raises(ValueError):
            WidthSchedule(a_max=0.01, a_min=0.04)
        with pytest.raises(ValueError):
            schedule_width(-1, WidthSchedule())


class TestLossWeight:
    def test_exact_gaussian_weights(self):
        ts = np.linspace(0.5, 4.5, 16)
        target = gaussian_weight_target(ts.reshape(1, -1), [2.0], 0.5)[0]
        out = loss_weight(Tensor(target), ts, 2.0, 0.5)
        assert out.item() == pytest.approx(0.0, abs=1e-12)

    def test_single_sample_at_root(self):
        out = loss_weight(Tensor(np.array([1.0])), np.array([2.0]), 2.0, 0.3)
        assert out.item() == 0.0

    def test_three_sample_analytic(self):
        a = 0.4
        ts = np.array([2.0 - a, 2.0, 2.0 + a])
        out = loss_weight(Tensor(np.zeros(3)), ts, 2.0, a)
        expected = np.exp(-2.0) + 1.0 + np.exp(-2.0)
        assert out.item() == pytest.approx(expected, rel=1e-6)

    def test_missing_hit_rejected(self):
        with pytest.raises(ValueError):
            loss_weight(Tensor(np.zeros(3)), np.linspace(0, 1, 3), None, 0.5)

    def test_batch_masks_misses(self):
        ts = np.tile(np.linspace(0.5, 4.5, 8), (2, 1))
        w = Tensor(np.full((2, 8), 0.3))
        out = loss_weight_batch(w, ts, np.array([2.0, 2.0]),
                                np.array([True, False]), 0.5)
        assert out.data[1] == 0.0
        single = loss_weight(Tensor(np.full(8, 0.3)), ts[0], 2.0, 0.5)
        assert out.data[0] == pytest.approx(single.item(), rel=1e-6)


class TestLossNormal:
    def test_zero_perturbation(self):
        def field(pts):
            return Tensor(1.0 / (1.0 + np.exp(-pts[:, 0:1])))

        out = loss_normal(field, np.array([0.3, 0.0, 0.0]), np.zeros(3))
        assert out.item() == pytest.approx(0.0, abs=1e-12)

    def test_linear_field_any_perturbation(self):
        def field(pts):
            return Tensor((0.5 + 0.2 * pts[:, 0] + 0.1 * pts[:, 2]).reshape(-1, 1))

        out = loss_normal(field, np.array([0.1, 0.2, 0.3]), np.array([0.004, -0.002, 0.001]))
        assert out.item() == pytest.approx(0.0, abs=1e-9)

    def test_rotated_gradient_gives_two(self):
        # gradient +x at the base point, +y at the perturbed point
        base = np.zeros(3)
        eps = np.array([10.0, 0.0, 0.0])

        def field(pts):
            vals = np.where(pts[:, 0] < 5.0, pts[:, 0], pts[:, 1])
            return Tensor(vals.reshape(-1, 1))

        out = loss_normal(field, base, eps)
        assert out.item() == pytest.approx(2.0, rel=1e-6)

    def test_agrees_with_spatial_grad_fd(self):
        """The taped probe path and the plain numpy operator use the same
        stencil."""
        from nerf2occ.surface import spatial_grad_fd

        def np_field(pts):
            return np.tanh(pts[:, 0] * 0.7 + pts[:, 1] * 0.2)

        def t_field(pts):
            return Tensor(np_field(pts).reshape(-1, 1))

        x = np.array([0.2, -0.1, 0.4])
        eps = np.array([0.005, 0.003, -0.002])
        g1 = spatial_grad_fd(np_field, x)
        g2 = spatial_grad_fd(np_field, x + eps)
        n1 = g1 / max(np.linalg.norm(g1), 1e-8)
        n2 = g2 / max(np.linalg.norm(g2), 1e-8)
        expected = ((n1 - n2) ** 2).sum()
        out = loss_normal(t_field, x, eps)
        assert out.item() == pytest.approx(expected, rel=1e-9)


class TestLossDepth:
    def test_identical(self):
        out = loss_depth(Tensor(np.array([1.0, 2.0])), [1.0, 2.0], [True, True])
        assert out.item() == 0.0

    def test_all_sentinel_is_zero(self):
        out = loss_depth(Tensor(np.array([1.0, 2.0])), [-1.0, -1.0], [False, False])
        assert out.item() == 0.0

    def test_uniform_offset(self):
        pred = Tensor(np.array([1.1, 2.1, 3.0]))
        out = loss_depth(pred, [1.0, 2.0, 5.0], [True, True, False])
        assert out.item() == pytest.approx(0.1, rel=1e-5)


class TestTotalLoss:
    def make_terms(self, n=4, boot=0.0):
        z = Tensor(np.zeros(n))
        return {"vol_o": z, "vol_sigma": Tensor(np.zeros(n)),
                "normal": Tensor(np.zeros(n)), "weight": Tensor(np.zeros(n)),
                "bootstrap": Tensor(np.full(n, boot)),
                "depth": Tensor(np.zeros(()))}

    def test_all_zero(self):
        out = total_loss(self.make_terms(), LossWeights(), k=0)
        assert out.item() == 0.0

    def test_warmup_boundary_values(self):
        terms = self.make_terms(boot=1.0)
        at99 = total_loss(terms, LossWeights(), k=99).item()
        terms = self.make_terms(boot=1.0)
        at100 = total_loss(terms, LossWeights(), k=100).item()
        assert at99 == pytest.approx(0.2, rel=1e-6)
        assert at100 == 0.0

    def test_reduces_to_rendering_terms(self):
        n = 3
        rng = np.random.default_rng(0)
        vo = rng.uniform(size=n)
        vs = rng.uniform(size=n)
        terms = {"vol_o": Tensor(vo), "vol_sigma": Tensor(vs),
                 "normal": Tensor(rng.uniform(size=n)),
                 "weight": Tensor(rng.uniform(size=n)),
                 "bootstrap": Tensor(rng.uniform(size=n)),
                 "depth": Tensor(np.array(0.7))}
        w = LossWeights(normal=0.0, weight=0.0, bootstrap=0.0, depth=0.1)
        out = total_loss(terms, w, k=0)
        assert out.item() == pytest.approx((vo + vs).mean() + 0.07, rel=1e-5)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(weight=-0.1)


class TestGradChecks:
    """Each loss against central finite differences, 64-bit."""

    def setup_method(self):
        ad.set_default_dtype(np.float64)
        self.rng = np.random.default_rng(17)

    def teardown_method(self):
        ad.set_default_dtype(np.float32)

    def test_loss_vol_grad(self):
        gt = self.rng.uniform(size=(4, 3))
        point = Tensor(self.rng.uniform(0.1, 0.9, size=(4, 3)))
        err = ad.grad_check(lambda c: ad.tsum(loss_vol(c, gt)), point, step=1e-6)
        assert err < 1e-4

    def test_loss_bootstrap_grad(self):
        alphas = self.rng.uniform(size=(2, 6))
        point = Tensor(self.rng.uniform(0.1, 0.9, size=(2, 6)))
        err = ad.grad_check(lambda o: ad.tsum(loss_bootstrap(o, alphas)), point,
                            step=1e-6)
        assert err < 1e-4

    def test_loss_weight_grad(self):
        ts = np.sort(self.rng.uniform(0.5, 4.5, size=(2, 6)), axis=1)
        t_star = np.array([2.0, 3.0])
        mask = np.array([True, True])
        point = Tensor(self.rng.uniform(0.05, 0.3, size=(2, 6)))
        err = ad.grad_check(
            lambda w: ad.tsum(loss_weight_batch(w, ts, t_star, mask, 0.5)),
            point, step=1e-6)
        assert err < 1e-4

    def test_loss_depth_grad(self):
        gt = self.rng.uniform(1.0, 3.0, size=5)
        mask = np.array([True, True, False, True, False])
        point = Tensor(gt + self.rng.uniform(0.05, 0.4, size=5))
        err = ad.grad_check(lambda d: loss_depth(d, gt, mask), point, step=1e-6)
        assert err < 1e-4

    def test_loss_normal_grad_through_probes(self):
        """Gradient w.r.t. a parameterized field feeding the probe stencil."""
        w0 = self.rng.normal(size=(3, 1)) * 0.5
        x_star = np.array([[0.2, 0.1, -0.1], [0.0, 0.3, 0.2]])
        eps = np.array([[0.004, -0.003, 0.002], [0.002, 0.001, -0.004]])
        mask = np.ones(2, dtype=bool)

        def run(wt):
            def field(pts):
                return ad.sigmoid(ad.matmul(Tensor(pts), wt))
            return ad.tsum(loss_normal_batch(field, x_star, eps, mask))

        err = ad.grad_check(lambda wt: run(wt), Tensor(w0), step=1e-6)
        assert err < 1e-4


def test_monotone_weight_improvement_on_frozen_toy_field():
    """Descent on the weight loss alone sharpens the composited weight at
    the sample nearest the root, monotonically over the first 50 steps."""
    from nerf2occ.renderer import composite

    ts = np.linspace(0.5, 4.5, 32).reshape(1, 32)
    t_star = np.array([2.3])
    nearest = int(np.argmin(np.abs(ts[0] - t_star[0])))
    mask = np.ones(1, dtype=bool)

    logits = Tensor(np.full((1, 32), -2.0), requires_grad=True)
    prev = None
    for step in range(50):
        with ad.tape() as tp:
            occ = ad.sigmoid(logits)
            out = composite(occ, Tensor(np.ones((1, 32, 3))), ts)
            loss = ad.tsum(loss_weight_batch(out.weights, ts, t_star, mask, 0.5))
            tp.backward(loss)
        w_nearest = float(out.weights.data[0, nearest])
        if prev is not None:
            assert w_nearest > prev, f"step {step}"
        prev = w_nearest
        logits.data -= 0.5 * logits.grad
        logits.zero_grad()
    assert prev > 0.15
