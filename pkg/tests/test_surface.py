import numpy as np
import pytest

from nerf2occ import _kernels, surface
from nerf2occ.surface import (TriangleMesh, edge_face_counts, export_obj,
                              find_flip, find_flips_batch, import_obj,
                              marching_cubes, secant_root, secant_roots_batch,
                              spatial_grad_fd)


def bisection_root(f, a, b, iso=0.5, tol=1e-8):
    """Independent root oracle."""
    ga = f(a) - iso
    assert ga < 0 <= f(b) - iso
    while b - a > tol:
        mid = 0.5 * (a + b)
        if f(mid) - iso < 0:
            a = mid
        else:
            b = mid
    return 0.5 * (a + b)


class TestFindFlip:
    def test_basic(self):
        assert find_flip([0.1, 0.2, 0.6, 0.9]) == 1

    def test_all_below(self):
        assert find_flip([0.1, 0.2, 0.3]) is None

    def test_born_inside(self):
        assert find_flip([0.7, 0.2, 0.6]) is None

    def test_batch_matches_single(self):
        rng = np.random.default_rng(0)
        vals = rng.uniform(0, 1, size=(50, 12))
        batch = find_flips_batch(vals)
        for i in range(50):
            single = find_flip(vals[i])
            assert batch[i] == (-1 if single is None else single)


class TestSecant:
    def test_linear_exact(self):
        assert secant_root(lambda t: t, 0.0, 1.0) == 0.5

    def test_logistic_against_bisection(self):
        f = lambda t: 1.0 / (1.0 + np.exp(-10.0 * (t - 0.3)))
        oracle = bisection_root(f, 0.0, 1.0)
        assert abs(oracle - 0.3) < 1e-8
        t_star = secant_root(f, 0.0, 1.0)
        assert abs(t_star - oracle) < 1e-4

    def test_steep_logistic_against_bisection(self):
        for center, scale in [(0.72, 80.0), (0.18, 25.0), (0.5, 300.0)]:
            f = lambda t: 1.0 / (1.0 + np.exp(-scale * (t - center)))
            oracle = bisection_root(f, 0.0, 1.0)
            t_star = secant_root(f, 0.0, 1.0)
            assert abs(t_star - oracle) < 1e-4, (center, scale)

    def test_result_stays_in_bracket(self):
        f = lambda t: 0.5 - 1e-9 + (t >= 1.0) * 1e-9
        t_star = secant_root(lambda t: 0.5 - 1e-9 if t < 1 else 0.5, 0.0, 1.0)
        assert 0.0 <= t_star <= 1.0

    def test_nonmonotone_bracket_converges(self):
        f = lambda t: 0.3 + 0.5 * t + 0.25 * np.sin(12 * t)
        oracle = bisection_root(f, 0.0, 1.0)
        t_star = secant_root(f, 0.0, 1.0, n_iters=16)
        assert 0.0 <= t_star <= 1.0
        assert abs(f(t_star) - 0.5) < 1e-3 or abs(t_star - oracle) < 1e-3

    def test_invalid_bracket_rejected(self):
        with pytest.raises(ValueError):
            secant_root(lambda t: t, 0.6, 1.0)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(1)
        centers = rng.uniform(0.2, 0.8, size=24)
        scales = rng.uniform(8, 120, size=24)

        def field(ts):
            return 1.0 / (1.0 + np.exp(-scales * (ts - centers)))

        lo = np.zeros(24)
        hi = np.ones(24)
        batch = secant_roots_batch(field, lo, hi, field(lo), field(hi))
        for i in range(24):
            f = lambda t: 1.0 / (1.0 + np.exp(-scales[i] * (t - centers[i])))
            single = secant_root(f, 0.0, 1.0)
            assert batch[i] == pytest.approx(single, abs=1e-12)
            assert abs(batch[i] - centers[i]) < 1e-4


class TestSpatialGrad:
    def test_linear_field(self):
        g = spatial_grad_fd(lambda p: 0.5 + 0.2 * p[:, 0], np.zeros(3), h=1e-3)
        np.testing.assert_allclose(g, [0.2, 0.0, 0.0], atol=1e-9)

    def test_constant_field(self):
        g = spatial_grad_fd(lambda p: np.full(len(p), 0.7), np.ones(3))
        np.testing.assert_array_equal(g, 0.0)

    def test_radial_logistic_gradient_is_radial(self):
        def field(p):
            r = np.linalg.norm(p, axis=1)
            return 1.0 / (1.0 + np.exp(-20.0 * (1.0 - r)))

        rng = np.random.default_rng(3)
        for _ in range(10):
            x = rng.normal(size=3)
            x *= rng.uniform(0.7, 1.3) / np.linalg.norm(x)
            g = spatial_grad_fd(field, x)
            direction = -x / np.linalg.norm(x)  # occupancy decreases outward
            cos = g @ direction / np.linalg.norm(g)
            assert np.arccos(np.clip(cos, -1, 1)) < 1e-3

    def test_bad_step_rejected(self):
        with pytest.raises(ValueError):
            spatial_grad_fd(lambda p: p[:, 0], np.zeros(3), h=0.0)


def smoothed_sphere(p):
    r = np.linalg.norm(p, axis=1)
    return 1.0 / (1.0 + np.exp(-20.0 * (1.0 - r)))


class TestMarchingCubes:
    def test_sphere_vertex_radii(self):
        res = 64
        mesh = marching_cubes(smoothed_sphere, [-1.5] * 3, [1.5] * 3, res)
        assert mesh.n_triangles > 1000
        cell = 3.0 / res
        radii = np.linalg.norm(mesh.vertices, axis=1)
        assert radii.min() >= 1.0 - 3 * cell
        assert radii.max() <= 1.0 + 3 * cell

    def test_watertight_sphere(self):
        mesh = marching_cubes(smoothed_sphere, [-1.5] * 3, [1.5] * 3, 32)
        counts = edge_face_counts(mesh)
        assert counts and all(c == 2 for c in counts.values())

    def test_empty_field(self):
        mesh = marching_cubes(lambda p: np.zeros(len(p)), [-1] * 3, [1] * 3, 8)
        assert mesh.n_vertices == 0 and mesh.n_triangles == 0

    def test_deterministic_counts(self):
        m1 = marching_cubes(smoothed_sphere, [-1.5] * 3, [1.5] * 3, 24)
        m2 = marching_cubes(smoothed_sphere, [-1.5] * 3, [1.5] * 3, 24)
        assert m1.n_vertices == m2.n_vertices and m1.n_triangles == m2.n_triangles
        assert np.array_equal(m1.vertices, m2.vertices)
        assert np.array_equal(m1.triangles, m2.triangles)

    def test_backends_identical(self):
        if not _kernels.HAVE_COMPILED:
            pytest.skip("compiled kernels not built")
        rng = np.random.default_rng(5)
        values = rng.uniform(0, 1, size=(12, 12, 12))
        cells = _kernels.find_active_cells(values, 0.5)
        origin = np.array([-1.0, -1.0, -1.0])
        v_py, t_py = _kernels.get_backend("python").polygonize_cells(
            values, 0.5, origin, 0.25, cells)
        v_cc, t_cc = _kernels.get_backend("compiled").polygonize_cells(
            values, 0.5, origin, 0.25, cells)
        assert np.array_equal(v_py, v_cc)
        assert np.array_equal(t_py, t_cc)

    def test_low_resolution_rejected(self):
        with pytest.raises(ValueError):
            marching_cubes(smoothed_sphere, [-1] * 3, [1] * 3, 1)

    def test_normals_point_consistently(self):
        mesh = marching_cubes(smoothed_sphere, [-1.5] * 3, [1.5] * 3, 32)
        normals = mesh.compute_vertex_normals()
        radial = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
        cos = (normals * radial).sum(axis=1)
        # a consistent orientation: all normals agree with +/- radial
        assert np.all(cos > 0.9) or np.all(cos < -0.9)


class TestObj:
    def test_round_trip(self, tmp_path):
        mesh = marching_cubes(smoothed_sphere, [-1.5] * 3, [1.5] * 3, 16)
        p1 = str(tmp_path / "a.obj")
        p2 = str(tmp_path / "b.obj")
        export_obj(mesh, p1)
        again = import_obj(p1)
        export_obj(again, p2)
        assert open(p1).read() == open(p2).read()
        assert np.array_equal(again.triangles, mesh.triangles)
        np.testing.assert_allclose(again.vertices, mesh.vertices, atol=1e-6)

    def test_single_triangle(self, tmp_path):
        mesh = TriangleMesh(np.eye(3), [[0, 1, 2]])
        path = str(tmp_path / "t.obj")
        export_obj(mesh, path)
        lines = open(path).read().strip().split("\n")
        assert len([l for l in lines if l.startswith("v ")]) == 3
        assert len([l for l in lines if l.startswith("f ")]) == 1

    def test_empty_mesh(self, tmp_path):
        path = str(tmp_path / "e.obj")
        export_obj(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3))), path)
        mesh = import_obj(path)
        assert mesh.n_vertices == 0 and mesh.n_triangles == 0

    def test_malformed_reports_line(self, tmp_path):
        path = str(tmp_path / "bad.obj")
        with open(path, "w") as f:
            f.write("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2\n")
        with pytest.raises(ValueError) as err:
            import_obj(path)
        assert ":4:" in str(err.value)

    def test_out_of_range_indices_rejected(self):
        with pytest.raises(ValueError):
            TriangleMesh(np.zeros((2, 3)), [[0, 1, 2]])
