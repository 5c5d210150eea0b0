import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatsurf.scene import (CameraView, GaussianScene, SceneBounds,
                             TrainingImage, logit, quat_to_rotmat, sigmoid)


def single_gaussian(quat, scales, opacity_logit=0.0, color=(0.5, 0.5, 0.5)):
    return GaussianScene(
        positions=np.zeros((1, 3)),
        log_scales=np.log(np.asarray(scales, dtype=np.float64))[None, :],
        rotations=np.asarray(quat, dtype=np.float64)[None, :],
        opacity_logits=np.array([opacity_logit]),
        colors=np.asarray(color, dtype=np.float64)[None, :],
    )


def random_scene(rng, n=16):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianScene(
        positions=rng.normal(size=(n, 3)),
        log_scales=rng.uniform(-3, 0, size=(n, 3)),
        rotations=q,
        opacity_logits=rng.normal(size=n),
        colors=rng.uniform(0, 1, size=(n, 3)),
    )


class TestCovariance:
    def test_isotropic_identity(self):
        g = single_gaussian([1, 0, 0, 0], [1, 1, 1])
        np.testing.assert_allclose(g.covariance()[0], np.eye(3), atol=1e-15)

    def test_axis_aligned(self):
        g = single_gaussian([1, 0, 0, 0], [2, 1, 0.01])
        np.testing.assert_allclose(g.covariance()[0], np.diag([4.0, 1.0, 1e-4]),
                                   rtol=1e-14, atol=0)

    @given(st.lists(st.floats(-1, 1), min_size=4, max_size=4),
           st.lists(st.floats(0.01, 2.0), min_size=3, max_size=3))
    @settings(max_examples=60, deadline=None)
    def test_eigenvalues_are_squared_scales(self, quat, scales):
        q = np.asarray(quat)
        if np.linalg.norm(q) < 1e-3:
            q = np.array([1.0, 0, 0, 0])
        g = single_gaussian(q, scales)
        cov = g.covariance()[0]
        np.testing.assert_allclose(cov, cov.T, atol=1e-14)
        eigvals = np.linalg.eigvalsh(cov)
        expected = np.sort(np.asarray(scales) ** 2)
        np.testing.assert_allclose(eigvals, expected, rtol=1e-9, atol=1e-12)

    def test_reconstruction_from_normal_and_scales(self):
        # Covariance rebuilt from the plane normal (minimum-scale eigenvector)
        # plus the remaining rotated axes must match the direct product form.
        rng = np.random.default_rng(7)
        scene = random_scene(rng, n=32)
        cov = scene.covariance()
        rots = scene.rotation_matrices()
        scales2 = scene.scales ** 2
        normals = scene.plane_normals()
        axes = scene.min_scale_axes()
        for i in range(len(scene)):
            rebuilt = np.zeros((3, 3))
            for k in range(3):
                u = normals[i] if k == axes[i] else rots[i][:, k]
                rebuilt += scales2[i, k] * np.outer(u, u)
            assert np.abs(rebuilt - cov[i]).max() < 1e-10


class TestPlaneNormal:
    def test_axis_aligned(self):
        g = single_gaussian([1, 0, 0, 0], [1, 1, 0.01])
        n = g.plane_normals()[0]
        assert abs(abs(n[2]) - 1.0) < 1e-12 and abs(n[0]) < 1e-12

    def test_rotated_90_about_x(self):
        # 90 degrees about x maps the y axis (the min-scale axis) onto z.
        q = np.array([np.cos(np.pi / 4), np.sin(np.pi / 4), 0, 0])
        g = single_gaussian(q, [1, 0.01, 1])
        n = g.plane_normals()[0]
        np.testing.assert_allclose(np.abs(n), [0, 0, 1], atol=1e-12)

    def test_tie_breaks_to_lowest_axis(self):
        g = single_gaussian([1, 0, 0, 0], [1, 1, 1])
        assert g.min_scale_axes()[0] == 0
        np.testing.assert_allclose(np.abs(g.plane_normals()[0]), [1, 0, 0],
                                   atol=1e-15)

    def test_unit_length(self):
        rng = np.random.default_rng(3)
        scene = random_scene(rng)
        norms = np.linalg.norm(scene.plane_normals(), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)

    def test_sign_faces_along_view_ray(self):
        # With a camera the normal is flipped so dot(n, pos - cam) >= 0:
        # positive blending distance for every primitive in front.
        rng = np.random.default_rng(11)
        scene = random_scene(rng, n=24)
        scene.positions += np.array([0.0, 0.0, 5.0])
        cam = np.zeros(3)
        n = scene.plane_normals(camera_center=cam)
        dots = np.einsum("ij,ij->i", n, scene.positions - cam)
        assert np.all(dots >= 0)


class TestQuaternions:
    @given(st.lists(st.floats(-2, 2), min_size=4, max_size=4))
    @settings(max_examples=60, deadline=None)
    def test_rotation_orthonormal(self, quat):
        q = np.asarray(quat)
        if np.linalg.norm(q) < 1e-3:
            q = np.array([0.3, -0.5, 0.1, 0.8])
        R = quat_to_rotmat(q)
        assert np.abs(R @ R.T - np.eye(3)).max() < 1e-9
        assert abs(np.linalg.det(R) - 1.0) < 1e-9

    def test_normalize_rotations(self):
        rng = np.random.default_rng(1)
        scene = random_scene(rng)
        scene.rotations *= 3.7
        scene.normalize_rotations()
        np.testing.assert_allclose(np.linalg.norm(scene.rotations, axis=1),
                                   1.0, atol=1e-6)


class TestActivations:
    def test_opacity_midpoint(self):
        g = single_gaussian([1, 0, 0, 0], [1, 1, 1], opacity_logit=0.0)
        assert g.opacities[0] == 0.5

    def test_sigmoid_logit_inverse(self):
        # Near saturation the representable precision of sigmoid output
        # limits the inverse to ~1e-7 absolute.
        x = np.linspace(-20, 20, 41)
        np.testing.assert_allclose(logit(sigmoid(x)), x, rtol=0, atol=1e-6)

    def test_scales_positive(self):
        rng = np.random.default_rng(5)
        scene = random_scene(rng)
        assert np.all(scene.scales > 0)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(42)
        scene = random_scene(rng, n=50)
        sections = {b"APPR": b"\x01\x02\x03network-bytes", b"NOTE": b""}
        path = tmp_path / "scene.tspl"
        scene.save(path, sections=sections)
        loaded, got_sections = GaussianScene.load(path)
        for name in ("positions", "log_scales", "rotations",
                     "opacity_logits", "colors"):
            a, b = getattr(scene, name), getattr(loaded, name)
            assert a.dtype == b.dtype and np.array_equal(a, b), name
        assert got_sections == sections

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad.tspl"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            GaussianScene.load(path)

    def test_empty_scene_round_trip(self, tmp_path):
        scene = GaussianScene.empty()
        path = tmp_path / "empty.tspl"
        scene.save(path)
        loaded, sections = GaussianScene.load(path)
        assert len(loaded) == 0 and sections == {}

    def test_ply_export(self, tmp_path):
        rng = np.random.default_rng(8)
        scene = random_scene(rng, n=5)
        path = tmp_path / "cloud.ply"
        scene.export_ply(path)
        text = path.read_text()
        assert text.startswith("ply\nformat ascii 1.0\n")
        assert "element vertex 5" in text
        body = [l for l in text.splitlines()[text.splitlines().index("end_header") + 1:]]
        assert len(body) == 5 and len(body[0].split()) == 6


class TestSceneOps:
    def test_select_and_concatenate(self):
        rng = np.random.default_rng(2)
        scene = random_scene(rng, n=10)
        a = scene.select(np.array([0, 1, 2]))
        b = scene.select(np.arange(3, 10))
        merged = GaussianScene.concatenate([a, b])
        assert np.array_equal(merged.positions, scene.positions)
        assert np.array_equal(merged.rotations, scene.rotations)

    def test_bounds(self):
        rng = np.random.default_rng(4)
        scene = random_scene(rng, n=30)
        bounds = scene.bounds(margin=0.0)
        assert np.all(bounds.contains(scene.positions))

    def test_validate_rejects_nonfinite(self):
        rng = np.random.default_rng(6)
        scene = random_scene(rng)
        scene.positions[0, 0] = np.nan
        with pytest.raises(ValueError):
            scene.validate()


class TestSceneBounds:
    def test_ordering_enforced(self):
        with pytest.raises(ValueError):
            SceneBounds(np.array([0.0, 0, 0]), np.array([1.0, -1, 1]))

    def test_contains(self):
        b = SceneBounds(np.zeros(3), np.ones(3))
        pts = np.array([[0.5, 0.5, 0.5], [1.5, 0.5, 0.5]])
        assert list(b.contains(pts)) == [True, False]


def make_view(width=8, height=6, f=10.0, cx=None, cy=None, crop=(0, 0)):
    cx = width / 2 if cx is None else cx
    cy = height / 2 if cy is None else cy
    K = np.array([[f, 0, cx], [0, f, cy], [0, 0, 1.0]])
    return CameraView(intrinsics=K, rotation_c2w=np.eye(3),
                      camera_center=np.zeros(3), width=width, height=height,
                      crop_origin=crop)


class TestCameraView:
    def test_validate_rejects_nonorthonormal(self):
        view = make_view()
        view.rotation_c2w = np.eye(3) * 1.001
        with pytest.raises(ValueError):
            view.validate()

    def test_world_camera_round_trip(self):
        rng = np.random.default_rng(9)
        q = rng.normal(size=4)
        view = make_view()
        view.rotation_c2w = quat_to_rotmat(q)
        view.camera_center = rng.normal(size=3)
        pts = rng.normal(size=(10, 3))
        back = view.camera_to_world(view.world_to_camera(pts))
        np.testing.assert_allclose(back, pts, atol=1e-12)

    def test_principal_ray_is_look_direction(self):
        # Odd principal point placed at an exact pixel center: the ray there
        # must be the camera z axis.
        view = make_view(width=8, height=6, cx=3.5, cy=2.5)
        rays = view.pixel_rays()
        np.testing.assert_allclose(rays[2, 3], view.look_direction(), atol=1e-15)

    def test_sub_image_rays_match_parent_bitwise(self):
        parent = make_view(width=8, height=6, f=37.0, cx=4.12, cy=2.93)
        parent_rays = parent.pixel_rays()
        x0, y0 = 4, 2
        K = parent.intrinsics.copy()
        K[0, 2] -= x0
        K[1, 2] -= y0
        sub = CameraView(intrinsics=K, rotation_c2w=parent.rotation_c2w,
                         camera_center=parent.camera_center, width=4, height=4,
                         crop_origin=(x0, y0))
        sub_rays = sub.pixel_rays()
        assert np.array_equal(sub_rays, parent_rays[y0:y0 + 4, x0:x0 + 4])

    def test_downsampled_intrinsics(self):
        view = make_view(width=8, height=6, f=10.0)
        half = view.downsampled(2)
        assert half.width == 4 and half.height == 3
        np.testing.assert_allclose(half.intrinsics[0, 0], 5.0)
        np.testing.assert_allclose(half.intrinsics[2], [0, 0, 1])


class TestTrainingImage:
    def test_downsample_average_pools(self):
        view = make_view(width=4, height=2)
        pixels = np.zeros((2, 4, 3))
        pixels[0, 0] = 1.0  # one bright pixel per 2x2 block quadrant
        img = TrainingImage(pixels=pixels, view=view)
        half = img.downsampled(2)
        assert half.pixels.shape == (1, 2, 3)
        np.testing.assert_allclose(half.pixels[0, 0], 0.25)
        np.testing.assert_allclose(half.pixels[0, 1], 0.0)
        assert half.view.width == 2 and half.downsample_level == 2

    def test_rejects_out_of_range(self):
        view = make_view(width=2, height=2)
        with pytest.raises(ValueError):
            TrainingImage(pixels=np.full((2, 2, 3), 1.5), view=view)
