"""Configuration loading and command-line workflow tests."""

import json

import numpy as np
import pytest

from splatsurf.cli import Dataset, _jobs, load_dataset, main
from splatsurf.colmap import (write_cameras_text, write_images_text,
                              write_points3d_text)
from splatsurf.config import (RunConfig, load_config, run_config_from_dict,
                              save_config)
from splatsurf.images import load_pfm, save_image
from splatsurf.mesher import load_ply
from splatsurf.scene import GaussianScene
from splatsurf.synthetic import SyntheticConfig, build_scene
from test_trainer import scene_equal


class TestConfig:
    def test_round_trip(self, tmp_path):
        config = RunConfig(seed=7, jobs=2)
        config.synthetic.num_views = 10
        config.schedule.total_iterations = 123
        path = tmp_path / "config.json"
        save_config(config, path)
        loaded = load_config(path)
        assert loaded.to_dict() == config.to_dict()

    def test_unknown_top_level_key(self):
        with pytest.raises(ValueError, match="learning_rate"):
            run_config_from_dict({"learning_rate": 0.1})

    def test_unknown_nested_key(self):
        with pytest.raises(ValueError, match="schedule"):
            run_config_from_dict({"schedule": {"warmup": 3}})

    def test_lists_become_tuples(self):
        config = run_config_from_dict(
            {"synthetic": {"look_at": [0.0, 0.0, 0.2],
                           "exposure_range": [0.8, 1.3]}})
        assert config.synthetic.look_at == (0.0, 0.0, 0.2)
        assert config.synthetic.exposure_range == (0.8, 1.3)

    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError, match="jobs"):
            run_config_from_dict({"jobs": 0})
        with pytest.raises(ValueError, match="total"):
            run_config_from_dict({"schedule": {"total_iterations": -1}})

    def test_bad_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ValueError, match="JSON"):
            load_config(path)

    def test_jobs_env_override(self, monkeypatch):
        config = RunConfig(jobs=2)
        monkeypatch.delenv("SPLATSURF_JOBS", raising=False)
        assert _jobs(config) == 2
        monkeypatch.setenv("SPLATSURF_JOBS", "4")
        assert _jobs(config) == 4


def rotmat_to_qvec(R) -> np.ndarray:
    """Unit (w, x, y, z) quaternion via the largest eigenvector of K."""
    Rxx, Ryx, Rzx = R[0, 0], R[0, 1], R[0, 2]
    Rxy, Ryy, Rzy = R[1, 0], R[1, 1], R[1, 2]
    Rxz, Ryz, Rzz = R[2, 0], R[2, 1], R[2, 2]
    K = np.array([
        [Rxx - Ryy - Rzz, 0.0, 0.0, 0.0],
        [Ryx + Rxy, Ryy - Rxx - Rzz, 0.0, 0.0],
        [Rzx + Rxz, Rzy + Ryz, Rzz - Rxx - Ryy, 0.0],
        [Ryz - Rzy, Rzx - Rxz, Rxy - Ryx, Rxx + Ryy + Rzz]]) / 3.0
    eigvals, eigvecs = np.linalg.eigh(K)
    qvec = eigvecs[[3, 0, 1, 2], np.argmax(eigvals)]
    return -qvec if qvec[0] < 0 else qvec


def tiny_config(tmp_path, **overrides) -> RunConfig:
    config = RunConfig(workdir=str(tmp_path / "run"), seed=0, jobs=1,
                       held_out_period=5)
    config.synthetic = SyntheticConfig(image_size=64, num_views=6,
                                       ring_radius=1.4, ring_height=2.6)
    config.schedule.total_iterations = 16
    config.schedule.coarse_downsample = 2
    config.schedule.geo_warmup = 10 ** 6
    config.partition.max_images = 3
    config.partition.min_length = 0.5
    config.partition.keep_min_images = 2
    config.mesh.voxel_size = 0.08
    for key, value in overrides.items():
        setattr(config, key, value)
    return config


def write_config(tmp_path, config) -> str:
    path = tmp_path / "config.json"
    save_config(config, path)
    return str(path)


class TestDataset:
    def test_synthetic_split(self, tmp_path):
        dataset = load_dataset(tiny_config(tmp_path))
        assert len(dataset.images) == 6
        assert [img.view.view_id for img in dataset.test] == [0, 5]
        assert [img.view.view_id for img in dataset.train] == [0, 1, 2, 3]
        assert len(dataset.init_scene) > 0
        assert dataset.ground_truth is not None

    def test_colmap_dataset(self, tmp_path):
        built = build_scene(SyntheticConfig(image_size=48, num_views=4))
        sparse = tmp_path / "sparse"
        images_dir = tmp_path / "images"
        sparse.mkdir()
        images_dir.mkdir()
        cameras, image_rows = {}, []
        for i, view in enumerate(built.views):
            cameras[i + 1] = ("PINHOLE", view.width, view.height,
                              [view.fx, view.fy, *view.principal_point])
            R_w2c = view.rotation_c2w.T
            tvec = -R_w2c @ view.camera_center
            image_rows.append((i + 1, rotmat_to_qvec(R_w2c), tvec, i + 1,
                               f"im_{i:02d}.png"))
            save_image(images_dir / f"im_{i:02d}.png", built.images[i])
        write_cameras_text(sparse / "cameras.txt", cameras)
        write_images_text(sparse / "images.txt", image_rows)
        points, colors = built.gt_cloud(500)
        write_points3d_text(sparse / "points3D.txt",
                            points, (colors * 255).astype(np.uint8))
        config = tiny_config(tmp_path, colmap_dir=str(sparse),
                             images_dir=str(images_dir))
        dataset = load_dataset(config)
        assert dataset.ground_truth is None
        assert len(dataset.images) == 4
        assert dataset.images[1].pixels.shape == (48, 48, 3)
        # PNG quantizes to 8 bits; poses and content must survive
        np.testing.assert_allclose(dataset.images[1].pixels,
                                   built.images[1], atol=1 / 255)
        np.testing.assert_allclose(dataset.images[1].view.camera_center,
                                   built.views[1].camera_center, atol=1e-5)


class TestCliWorkflow:
    def test_staged_commands_match_reconstruct(self, tmp_path):
        staged = tiny_config(tmp_path)
        cfg = write_config(tmp_path, staged)
        run = tmp_path / "run"

        assert main(["coarse", cfg]) == 0
        assert (run / "coarse.splat").exists()
        assert (run / "coarse_losses.csv").exists()
        assert (run / "config_used.json").exists()

        assert main(["partition", cfg]) == 0
        report = json.loads((run / "partition.json").read_text())
        assert report["num_cells"] >= 2
        assert (run / "partition.svg").exists()

        for cell in report["cells"]:
            assert main(["refine", cfg, "--cell", str(cell["id"])]) == 0
            assert (run / "cells" / f"cell_{cell['id']:03d}.splat").exists()
            assert (run / f"cell_{cell['id']:03d}_losses.csv").exists()

        assert main(["merge", cfg]) == 0
        merged, sections = GaussianScene.load(run / "merged.splat")
        assert b"APPR" in sections and b"MASK" in sections

        assert main(["mesh", cfg]) == 0
        mesh = load_ply(run / "mesh.ply")
        assert len(mesh.triangles) > 0
        assert (run / "mesh.obj").exists()

        assert main(["eval", cfg]) == 0
        report = json.loads((run / "eval.json").read_text())
        assert report["held_out"] == [0, 5]
        assert np.isfinite(report["psnr_mean"])
        assert report["geometry"] is not None
        assert report["geometry"]["rmse"] >= report["geometry"]["mae"]
        lines = (run / "eval_views.csv").read_text().splitlines()
        assert lines[0] == "view_id,psnr,ssim"
        assert len(lines) == 3

        one_shot = tiny_config(tmp_path, workdir=str(tmp_path / "oneshot"))
        cfg2 = str(tmp_path / "oneshot.json")
        save_config(one_shot, cfg2)
        assert main(["reconstruct", cfg2]) == 0
        direct, direct_sections = GaussianScene.load(
            tmp_path / "oneshot" / "merged.splat")
        assert scene_equal(merged, direct)
        assert direct_sections[b"APPR"] == sections[b"APPR"]
        assert direct_sections[b"MASK"] == sections[b"MASK"]

    def test_render_outputs(self, tmp_path):
        config = tiny_config(tmp_path, use_masks=True)
        cfg = write_config(tmp_path, config)
        assert main(["coarse", cfg]) == 0
        assert main(["render", cfg, "--view", "2", "--dump-pfm",
                     "--mask-png"]) == 0
        run = tmp_path / "run"
        assert (run / "render_002.png").exists()
        for name in ("color", "alpha", "normal", "distance", "depth"):
            assert (run / f"render_002_{name}.pfm").exists()
        depth = load_pfm(run / "render_002_depth.pfm")
        assert depth.shape == (64, 64)
        assert (run / "render_002_mask.png").exists()

    def test_error_paths(self, tmp_path):
        cfg = write_config(tmp_path, tiny_config(tmp_path))
        with pytest.raises(FileNotFoundError, match="reconstruct"):
            main(["mesh", cfg])
        with pytest.raises(FileNotFoundError, match="coarse"):
            main(["partition", cfg])
        assert main(["coarse", cfg]) == 0
        with pytest.raises(ValueError, match="not in partition"):
            main(["refine", cfg, "--cell", "99"])
        with pytest.raises(ValueError, match="out of range"):
            main(["render", cfg, "--view", "99"])
