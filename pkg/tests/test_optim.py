"""Optimizer and density-control tests."""

import numpy as np
import pytest

from splatsurf.optim import (Adam, DensifyPolicy, SCENE_PARAMS,
                             densify_and_prune, exponential_lr)
from splatsurf.scene import GaussianScene


def make_scene(n, rng=None, scale=0.05):
    rng = rng or np.random.default_rng(0)
    scene = GaussianScene(
        positions=rng.uniform(0.0, 2.0, (n, 3)),
        log_scales=np.full((n, 3), np.log(scale)),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        opacity_logits=np.full(n, 2.0),
        colors=np.full((n, 3), 0.5),
    )
    scene.positions[:, 2] = 0.0
    return scene


class TestAdam:
    def test_matches_reference_updates(self):
        # scalar reference computed step by step with the textbook recurrences
        adam = Adam({"w": 0.1})
        value = np.array([1.0])
        m = v = 0.0
        for t in range(1, 6):
            grad = np.array([2.0 * value[0]])
            m = 0.9 * m + 0.1 * grad[0]
            v = 0.999 * v + 0.001 * grad[0] ** 2
            expect = value[0] - 0.1 * (m / (1 - 0.9 ** t)) / (
                np.sqrt(v / (1 - 0.999 ** t)) + 1e-15)
            value = adam.update("w", value, grad)
            np.testing.assert_allclose(value[0], expect, rtol=1e-14)

    def test_converges_on_quadratic(self):
        adam = Adam({"w": 0.05})
        value = np.array([3.0, -2.0])
        for _ in range(2000):
            value = adam.update("w", value, 2.0 * value)
        assert np.abs(value).max() < 1e-4

    def test_update_does_not_mutate_input(self):
        adam = Adam({"w": 0.1})
        value = np.ones(3)
        adam.update("w", value, np.ones(3))
        np.testing.assert_array_equal(value, np.ones(3))

    def test_lr_override(self):
        base = Adam({"w": 0.1})
        over = Adam({"w": 99.0})
        grad = np.array([1.0, -2.0])
        a = base.update("w", np.zeros(2), grad)
        b = over.update("w", np.zeros(2), grad, lr=0.1)
        np.testing.assert_array_equal(a, b)

    def test_remap_preserves_kept_rows(self):
        adam = Adam({"positions": 0.01})
        value = np.arange(12.0).reshape(4, 3)
        grad = np.ones((4, 3)) * np.arange(1, 5)[:, None]
        adam.update("positions", value, grad)
        adam.update("positions", value, grad)
        m_before, v_before, t_before = [np.copy(s) if isinstance(s, np.ndarray)
                                        else s for s in adam.state["positions"]]
        keep = np.array([0, 2])
        adam.remap_rows(["positions"], keep, num_new=3)
        m, v, t = adam.state["positions"]
        assert m.shape == (5, 3) and v.shape == (5, 3)
        assert t == t_before == 2
        np.testing.assert_array_equal(m[:2], m_before[keep])
        np.testing.assert_array_equal(v[:2], v_before[keep])
        np.testing.assert_array_equal(m[2:], 0.0)
        np.testing.assert_array_equal(v[2:], 0.0)

    def test_remap_skips_unseen_names(self):
        adam = Adam({"positions": 0.01})
        adam.remap_rows(["positions"], np.array([0]), num_new=1)
        assert adam.state == {}


class TestSchedule:
    def test_exponential_endpoints_and_midpoint(self):
        assert exponential_lr(0, 100, 1.6e-4, 1.6e-6) == pytest.approx(1.6e-4)
        assert exponential_lr(100, 100, 1.6e-4, 1.6e-6) == pytest.approx(1.6e-6)
        mid = exponential_lr(50, 100, 1e-2, 1e-4)
        assert mid == pytest.approx(1e-3, rel=1e-12)

    def test_clamps_outside_range(self):
        assert exponential_lr(500, 100, 1e-2, 1e-4) == pytest.approx(1e-4)
        assert exponential_lr(-5, 100, 1e-2, 1e-4) == pytest.approx(1e-2)

    def test_policy_active_window(self):
        policy = DensifyPolicy(interval=100, start_iteration=500,
                               stop_fraction=0.8)
        assert not policy.active(400, 1000)
        assert not policy.active(550, 1000)  # off the interval grid
        assert policy.active(500, 1000)
        assert policy.active(800, 1000)
        assert not policy.active(900, 1000)  # past stop fraction

    def test_policy_validation(self):
        with pytest.raises(ValueError, match="interval"):
            DensifyPolicy(interval=0).validate()
        with pytest.raises(ValueError, match="stop_fraction"):
            DensifyPolicy(stop_fraction=1.5).validate()
        with pytest.raises(ValueError, match="split_factor"):
            DensifyPolicy(split_factor=1.0).validate()
        with pytest.raises(ValueError, match="max_gaussians"):
            DensifyPolicy(max_gaussians=0).validate()
        DensifyPolicy().validate()


class TestDensify:
    def setup_method(self):
        self.policy = DensifyPolicy()
        self.rng = np.random.default_rng(42)

    def test_noop_when_quiet(self):
        scene = make_scene(6)
        new, report = densify_and_prune(scene, np.zeros(6), self.policy,
                                        extent=10.0, rng=self.rng)
        assert report.total == 6
        assert report.cloned == report.split == report.pruned == 0
        np.testing.assert_array_equal(new.positions, scene.positions)

    def test_clone_copies_small_hot_gaussians(self):
        scene = make_scene(5, scale=0.05)
        grads = np.array([0.0, 3e-4, 0.0, 5e-4, 0.0])
        new, report = densify_and_prune(scene, grads, self.policy,
                                        extent=10.0, rng=self.rng)
        # scale 0.05 < 0.01 * 10.0, so both hot gaussians clone in place
        assert report.cloned == 2 and report.split == 0
        assert len(new) == 7
        np.testing.assert_array_equal(new.positions[:5], scene.positions)
        np.testing.assert_array_equal(new.positions[5:],
                                      scene.positions[[1, 3]])
        np.testing.assert_array_equal(new.colors[5:], scene.colors[[1, 3]])

    def test_split_replaces_large_hot_gaussians(self):
        scene = make_scene(4, scale=0.5)
        grads = np.array([0.0, 3e-4, 0.0, 0.0])
        new, report = densify_and_prune(scene, grads, self.policy,
                                        extent=10.0, rng=self.rng)
        assert report.split == 1 and report.cloned == 0
        assert len(new) == 5  # parent replaced by two children
        np.testing.assert_array_equal(new.positions[:3],
                                      scene.positions[[0, 2, 3]])
        np.testing.assert_allclose(
            new.log_scales[3:],
            np.tile(scene.log_scales[1] - np.log(1.6), (2, 1)))

    def test_split_children_follow_parent_distribution(self):
        scene = make_scene(1, scale=0.5)
        scene.positions[0] = [1.0, 2.0, 3.0]
        grads = np.array([1e-3])
        rng = np.random.default_rng(7)
        expect_z = np.random.default_rng(7).standard_normal((2, 1, 3))
        new, _ = densify_and_prune(scene, grads, self.policy,
                                   extent=10.0, rng=rng)
        # identity rotation: child = mean + scales * z exactly
        want = scene.positions[0] + 0.5 * expect_z[:, 0]
        np.testing.assert_allclose(new.positions, want, atol=1e-12)

    def test_split_deterministic_for_fixed_seed(self):
        scene = make_scene(3, scale=0.5)
        grads = np.array([1e-3, 0.0, 1e-3])
        a, _ = densify_and_prune(scene, grads, self.policy, extent=10.0,
                                 rng=np.random.default_rng(9))
        b, _ = densify_and_prune(scene, grads, self.policy, extent=10.0,
                                 rng=np.random.default_rng(9))
        np.testing.assert_array_equal(a.positions, b.positions)

    def test_prune_by_opacity(self):
        scene = make_scene(4)
        scene.opacity_logits[2] = -8.0  # sigmoid ~ 3.4e-4 < 5e-3
        new, report = densify_and_prune(scene, np.zeros(4), self.policy,
                                        extent=10.0, rng=self.rng)
        assert report.pruned == 1 and len(new) == 3
        np.testing.assert_array_equal(new.positions,
                                      scene.positions[[0, 1, 3]])

    def test_prune_by_world_scale(self):
        scene = make_scene(3)
        scene.log_scales[1, 0] = np.log(1.5)  # > 0.1 * extent 10
        new, report = densify_and_prune(scene, np.zeros(3), self.policy,
                                        extent=10.0, rng=self.rng)
        assert report.pruned == 1 and len(new) == 2

    def test_prune_outside_keep_box(self):
        scene = make_scene(4)
        scene.positions[:, 0] = [0.5, 1.5, 2.5, 1.0]
        scene.positions[:, 1] = 1.0
        scene.positions[3, 2] = 50.0  # z never matters for the box
        new, report = densify_and_prune(scene, np.zeros(4), self.policy,
                                        extent=10.0, rng=self.rng,
                                        keep_box=(0.0, 2.0, 0.0, 2.0))
        assert report.pruned == 1 and len(new) == 3
        assert 2.5 not in new.positions[:, 0]
        assert 50.0 in new.positions[:, 2]

    def test_adam_state_tracks_survivors(self):
        scene = make_scene(4)
        scene.opacity_logits[0] = -8.0
        grads = np.array([0.0, 3e-4, 0.0, 0.0])
        adam = Adam({name: 0.01 for name in SCENE_PARAMS})
        for name in SCENE_PARAMS:
            arr = getattr(scene, name)
            adam.update(name, arr, np.ones_like(arr))
        m_before = np.copy(adam.state["positions"][0])
        new, _ = densify_and_prune(scene, grads, self.policy, extent=10.0,
                                   rng=self.rng, adam=adam)
        assert len(new) == 4  # one pruned, one cloned
        m = adam.state["positions"][0]
        assert m.shape == (4, 3)
        np.testing.assert_array_equal(m[:3], m_before[1:])
        np.testing.assert_array_equal(m[3], 0.0)
        for name in SCENE_PARAMS:
            assert adam.state[name][0].shape == getattr(new, name).shape

    def test_max_gaussians_cap(self):
        scene = make_scene(6, scale=0.05)
        grads = np.full(6, 1e-3)
        policy = DensifyPolicy(max_gaussians=8)
        new, report = densify_and_prune(scene, grads, policy, extent=10.0,
                                        rng=self.rng)
        assert len(new) <= 8
        assert report.cloned == 2

    def test_non_finite_raises(self):
        scene = make_scene(3)
        scene.positions[1, 0] = np.nan
        with pytest.raises(RuntimeError, match="positions"):
            densify_and_prune(scene, np.zeros(3), self.policy, extent=10.0,
                              rng=self.rng)

    def test_grad_shape_checked(self):
        scene = make_scene(3)
        with pytest.raises(ValueError, match="per Gaussian"):
            densify_and_prune(scene, np.zeros(4), self.policy, extent=10.0,
                              rng=self.rng)
