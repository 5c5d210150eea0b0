import numpy as np

from splatsurf.synthetic import (SyntheticConfig, build_scene, desk_mesh,
                                 raycast, sample_triangle_points,
                                 surface_color)


def small_config(**kwargs):
    defaults = dict(image_size=48, num_views=6, seed=3)
    defaults.update(kwargs)
    return SyntheticConfig(**defaults)


class TestRaycast:
    def test_ground_depth_matches_analytic_plane(self):
        scene = build_scene(small_config())
        view = scene.views[0]
        rays = view.pixel_rays()
        cast_depth = scene.depths[0]
        on_ground = np.isin(
            np.where(scene.hits[0], 0, -1), [0]) & scene.hits[0]
        # Recompute which pixels hit the ground triangles.
        vertices, triangles = scene.vertices, scene.triangles
        result = raycast(view.camera_center, rays, vertices, triangles)
        on_ground = result.hit & (result.triangle < 2)
        assert on_ground.sum() > 200
        analytic = -view.camera_center[2] / rays[..., 2]
        np.testing.assert_allclose(cast_depth[on_ground],
                                   analytic[on_ground], atol=1e-9)

    def test_boxes_occlude_ground(self):
        scene = build_scene(small_config())
        view = scene.views[1]
        rays = view.pixel_rays()
        result = raycast(view.camera_center, rays, scene.vertices,
                         scene.triangles)
        on_box = result.hit & (result.triangle >= 2)
        assert on_box.sum() > 50
        plane_depth = -view.camera_center[2] / rays[..., 2]
        assert np.all(result.depth[on_box] < plane_depth[on_box] + 1e-12)

    def test_shared_edge_has_no_crack(self):
        vertices, triangles = desk_mesh()
        origin = np.array([0.0, 0.0, 3.0])
        for s in (0.2, -0.4, 0.77):
            target = np.array([s, s, 0.0])   # on the plane's diagonal edge
            d = target - origin
            d = d / d[2] * np.sign(d[2]) if d[2] != 0 else d
            direction = (target - origin)
            direction = direction / abs(direction[2])
            result = raycast(origin, direction[None, :], vertices[:4],
                             triangles[:2])
            assert result.hit[0]
            np.testing.assert_allclose(result.depth[0], 3.0, atol=1e-9)


class TestSceneImages:
    def test_deterministic(self):
        a = build_scene(small_config())
        b = build_scene(small_config())
        for ia, ib in zip(a.images, b.images):
            assert np.array_equal(ia, ib)

    def test_images_in_range_and_mostly_hit(self):
        scene = build_scene(small_config())
        for image, hit in zip(scene.images, scene.hits):
            assert image.min() >= 0.0 and image.max() <= 1.0
            assert hit.mean() > 0.5

    def test_principal_points_near_center(self):
        scene = build_scene(small_config(image_size=64))
        for view in scene.views:
            cx, cy = view.principal_point
            assert 64 / 4 <= cx <= 3 * 64 / 4
            assert 64 / 4 <= cy <= 3 * 64 / 4

    def test_exposure_multiplies_images(self):
        base = build_scene(small_config())
        exposed = build_scene(small_config(exposure_range=(0.8, 1.3)))
        assert not np.allclose(exposed.exposures, 1.0)
        for img_b, img_e, mult in zip(base.images, exposed.images,
                                      exposed.exposures):
            unclipped = img_b * mult < 1.0
            np.testing.assert_allclose(img_e[unclipped],
                                       (img_b * mult)[unclipped], atol=1e-12)

    def test_transient_quad_only_in_listed_views(self):
        base = build_scene(small_config())
        scene = build_scene(small_config(transient_views=(1, 4)))
        assert set(scene.transient_regions) == {1, 4}
        for i in range(scene.config.num_views):
            diff = np.abs(scene.images[i] - base.images[i]).sum(axis=-1)
            if i in (1, 4):
                region = scene.transient_regions[i]
                assert 0.005 < region.mean() < 0.4
                assert diff[region].mean() > 0.1
                assert np.all(diff[~region] == 0.0)
            else:
                assert np.all(diff == 0.0)

    def test_transient_quad_moves_between_views(self):
        scene = build_scene(small_config(transient_views=(1, 4)))
        r1, r4 = scene.transient_regions[1], scene.transient_regions[4]
        overlap = (r1 & r4).sum() / max(min(r1.sum(), r4.sum()), 1)
        assert overlap < 0.9

    def test_textureless_region_renders_flat(self):
        region = (-0.8, -0.2, 0.2, 0.8)
        scene = build_scene(small_config(textureless_region=region))
        view = scene.views[0]
        rays = view.pixel_rays()
        cast = raycast(view.camera_center, rays, scene.vertices,
                       scene.triangles)
        pts = cast.points
        inside = cast.hit & (cast.triangle < 2) & \
            (pts[..., 0] >= region[0]) & (pts[..., 0] <= region[1]) & \
            (pts[..., 1] >= region[2]) & (pts[..., 1] <= region[3])
        assert inside.sum() > 20
        colors = scene.images[0][inside]
        assert np.ptp(colors, axis=0).max() < 1e-12


class TestSurfaceSampling:
    def test_points_lie_on_mesh_extent(self):
        vertices, triangles = desk_mesh()
        pts = sample_triangle_points(vertices, triangles, 500, seed=1)
        assert pts.shape == (500, 3)
        assert pts[:, 2].min() >= -1e-12
        assert pts[:, 2].max() <= 0.35 + 1e-12
        assert np.abs(pts[:, :2]).max() <= 1.6 + 1e-12

    def test_seed_determinism(self):
        vertices, triangles = desk_mesh()
        a = sample_triangle_points(vertices, triangles, 100, seed=5)
        b = sample_triangle_points(vertices, triangles, 100, seed=5)
        assert np.array_equal(a, b)

    def test_bundle_packaging(self):
        scene = build_scene(small_config())
        bundle = scene.bundle(sparse_points=300, seed=2)
        assert len(bundle.views) == 6
        assert len(bundle.image_names) == 6
        assert bundle.points.shape == (300, 3)
        assert bundle.point_colors.shape == (300, 3)
        bounds = bundle.bounds()
        assert np.all(bounds.min < bounds.max)

    def test_colored_like_surface(self):
        scene = build_scene(small_config())
        pts, colors = scene.gt_cloud(count=200, seed=0)
        np.testing.assert_allclose(colors, surface_color(pts), atol=1e-12)
