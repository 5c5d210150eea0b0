"""Quality-metric tests: PSNR, SSIM, mesh-to-cloud distances."""

import math

import numpy as np
import pytest

from splatsurf.mesher import TriangleMesh
from splatsurf.metrics import (GeoReport, cloud_mean_spacing, evaluate_views,
                               held_out_split, mesh_accuracy,
                               nearest_distances, psnr, sample_mesh_points,
                               ssim)


def naive_ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Direct per-pixel sliding window with zero padding outside the image."""
    taps = np.arange(window) - window // 2
    k = np.exp(-0.5 * (taps / sigma) ** 2)
    k /= k.sum()
    w2d = np.outer(k, k)
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    h, w, channels = a.shape
    c1, c2 = k1 ** 2, k2 ** 2
    totals = []
    for c in range(channels):
        scores = np.zeros((h, w))
        for y in range(h):
            for x in range(w):
                stats = np.zeros(5)
                for dy in taps:
                    for dx in taps:
                        yy, xx = y + dy, x + dx
                        if not (0 <= yy < h and 0 <= xx < w):
                            continue
                        wgt = w2d[dy + window // 2, dx + window // 2]
                        pa, pb = a[yy, xx, c], b[yy, xx, c]
                        stats += wgt * np.array(
                            [pa, pb, pa * pa, pb * pb, pa * pb])
                mu_a, mu_b, aa, bb, ab = stats
                var_a, var_b = aa - mu_a ** 2, bb - mu_b ** 2
                cov = ab - mu_a * mu_b
                scores[y, x] = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
                    (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
        totals.append(scores.mean())
    return float(np.mean(totals))


def plane_mesh(z=0.0, extent=1.0):
    v = np.array([[0.0, 0.0, z], [extent, 0.0, z],
                  [extent, extent, z], [0.0, extent, z]])
    return TriangleMesh(v, np.array([[0, 1, 2], [0, 2, 3]]))


def plane_cloud(spacing, z=0.0, extent=1.0):
    xs = np.arange(0.0, extent + spacing / 2, spacing)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(),
                     np.full(gx.size, z)], axis=1)


class TestPsnr:
    def test_identical_hits_sentinel(self):
        img = np.random.default_rng(0).random((8, 8, 3))
        assert psnr(img, img) == 99.0

    def test_uniform_offset_closed_form(self):
        a = np.zeros((16, 16, 3))
        b = np.full((16, 16, 3), 0.1)
        assert math.isclose(psnr(a, b), 20.0, abs_tol=1e-12)

    def test_matches_reimplementation(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((12, 9, 3)), rng.random((12, 9, 3))
        expected = 10.0 * math.log10(1.0 / np.mean((a - b) ** 2))
        assert math.isclose(psnr(a, b), expected, abs_tol=1e-9)

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((7, 7)), rng.random((7, 7))
        assert psnr(a, b) == psnr(b, a)

    def test_near_identical_capped(self):
        a = np.full((8, 8), 0.5)
        assert psnr(a, a + 1e-9) == 99.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shapes"):
            psnr(np.zeros((4, 4)), np.zeros((5, 4)))


class TestSsim:
    def test_identical_is_one(self):
        img = np.random.default_rng(3).random((20, 20))
        assert math.isclose(ssim(img, img), 1.0, abs_tol=1e-12)

    def test_inversion_below_one(self):
        img = np.random.default_rng(4).random((24, 24))
        assert ssim(img, 1.0 - img) < 1.0

    def test_symmetric(self):
        rng = np.random.default_rng(5)
        a, b = rng.random((16, 16)), rng.random((16, 16))
        assert math.isclose(ssim(a, b), ssim(b, a), abs_tol=1e-12)

    def test_matches_naive_window_gray(self):
        rng = np.random.default_rng(6)
        a, b = rng.random((20, 17)), rng.random((20, 17))
        assert math.isclose(ssim(a, b), naive_ssim(a, b), abs_tol=1e-6)

    def test_matches_naive_window_color(self):
        rng = np.random.default_rng(7)
        a = rng.random((14, 13, 3))
        b = np.clip(a + 0.2 * rng.standard_normal(a.shape), 0, 1)
        assert math.isclose(ssim(a, b), naive_ssim(a, b), abs_tol=1e-6)

    def test_bounded(self):
        rng = np.random.default_rng(8)
        for _ in range(5):
            a, b = rng.random((12, 12)), rng.random((12, 12))
            assert -1.0 <= ssim(a, b) <= 1.0


class TestMeshAccuracy:
    def test_coincident_plane_below_spacing(self):
        report = mesh_accuracy(plane_mesh(), plane_cloud(0.05))
        assert report.mae < 0.05
        assert report.rmse >= report.mae >= 0.0

    def test_offset_plane_recovers_delta(self):
        delta = 0.03
        report = mesh_accuracy(plane_mesh(z=delta), plane_cloud(0.01))
        assert delta <= report.mae < delta + 1e-3

    def test_sample_count_follows_density(self):
        cloud = plane_cloud(0.05)
        spacing = cloud_mean_spacing(cloud)
        report = mesh_accuracy(plane_mesh(), cloud)
        assert report.count == math.ceil(10.0 * 1.0 / spacing ** 2)
        half = mesh_accuracy(plane_mesh(), cloud, density=5.0)
        assert half.count == math.ceil(5.0 * 1.0 / spacing ** 2)

    def test_indexed_nn_equals_brute_force(self):
        rng = np.random.default_rng(9)
        queries, cloud = rng.random((100, 3)), rng.random((100, 3))
        indexed = nearest_distances(queries, cloud)
        diff = queries[:, None, :] - cloud[None, :, :]
        brute = np.sqrt((diff ** 2).sum(axis=2).min(axis=1))
        assert np.array_equal(indexed, brute)

    def test_deterministic_per_seed(self):
        mesh, cloud = plane_mesh(), plane_cloud(0.05)
        a = mesh_accuracy(mesh, cloud, seed=3)
        b = mesh_accuracy(mesh, cloud, seed=3)
        c = mesh_accuracy(mesh, cloud, seed=4)
        assert a == b
        assert a.mae != c.mae

    def test_percentiles_monotone(self):
        report = mesh_accuracy(plane_mesh(z=0.02), plane_cloud(0.03))
        values = [report.percentiles[p] for p in (50, 75, 90, 95, 99)]
        assert values == sorted(values)
        assert values[0] >= 0.0

    def test_empty_mesh_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            mesh_accuracy(TriangleMesh.empty(), plane_cloud(0.1))

    def test_tiny_cloud_rejected(self):
        with pytest.raises(ValueError, match="cloud"):
            mesh_accuracy(plane_mesh(), np.zeros((1, 3)))

    def test_report_validation(self):
        with pytest.raises(ValueError, match="RMSE"):
            GeoReport(mae=0.5, rmse=0.4, count=10).validate()
        with pytest.raises(ValueError, match="count"):
            GeoReport(mae=0.1, rmse=0.2, count=0).validate()

    def test_display_scaling(self):
        report = mesh_accuracy(plane_mesh(z=0.02), plane_cloud(0.03))
        d = report.as_dict()
        assert math.isclose(d["mae_x100"], 100.0 * report.mae)
        assert math.isclose(d["rmse_x100"], 100.0 * report.rmse)

    def test_area_weighted_sampling(self):
        # two triangles, one 100x the area of the other: samples follow area
        v = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [10.0, 10.0, 0.0],
                      [0.0, 0.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 1.0]])
        mesh = TriangleMesh(v, np.array([[0, 1, 2], [3, 4, 5]]))
        pts = sample_mesh_points(mesh, 5000, np.random.default_rng(10))
        big = (pts[:, 2] == 0.0).mean()
        assert 0.97 < big < 1.0


class TestHeldOut:
    def test_every_eighth_excluded(self):
        train, test = held_out_split(24)
        assert test.tolist() == [0, 8, 16]
        assert len(train) == 21
        assert sorted(np.concatenate([train, test]).tolist()) == list(range(24))

    def test_custom_period(self):
        train, test = held_out_split(10, period=5)
        assert test.tolist() == [0, 5]
        with pytest.raises(ValueError, match="period"):
            held_out_split(10, period=1)


class TestEvaluateViews:
    def test_self_render_is_perfect(self):
        from test_trainer import flat_gaussians, render_images, ring_views
        scene = flat_gaussians()
        views = ring_views(count=2, size=48)
        images = render_images(scene, views)
        rows = evaluate_views(scene, images)
        assert len(rows) == 2
        for row in rows:
            assert row["psnr"] == 99.0
            assert row["ssim"] > 0.999

    def test_perturbed_scene_scores_lower(self):
        from test_trainer import flat_gaussians, render_images, ring_views
        scene = flat_gaussians()
        views = ring_views(count=2, size=48)
        images = render_images(scene, views)
        worse = scene.copy()
        worse.colors = np.clip(worse.colors + 0.3, 0.0, 1.0)
        rows = evaluate_views(worse, images)
        assert all(row["psnr"] < 40.0 for row in rows)
        assert all(row["ssim"] < 0.999 for row in rows)
