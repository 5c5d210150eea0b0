"""Command-line front end: staged pipeline commands over one run config."""

import argparse
import csv
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .colmap import init_gaussians, load_colmap
from .config import RunConfig, load_config, save_config
from .images import load_image, save_gray, save_image, save_pfm
from .mesher import fuse_scene, load_ply
from .metrics import evaluate_views, held_out_split, mesh_accuracy
from .networks import AppearanceModel, TransientMaskModel
from .partition import build_partition
from .raster import gaussian_weight_totals, render
from .scene import GaussianScene, TrainingImage
from .synthetic import build_scene
from .trainer import merge_cells, number_images, refine_cell, run_pipeline, \
    train_coarse

logger = logging.getLogger(__name__)


@dataclass
class Dataset:
    images: list       # every view, numbered 0..N-1
    train: list        # training subset, renumbered 0..T-1
    test: list         # held-out subset, keeping whole-run numbering
    init_scene: GaussianScene
    ground_truth: object = None    # synthetic scene when one was generated


def load_dataset(config: RunConfig) -> Dataset:
    if config.colmap_dir:
        bundle = load_colmap(config.colmap_dir,
                             Path(config.images_dir)
                             if config.images_dir else None)
        images = [TrainingImage(load_image(view.image_path), view)
                  for view in bundle.views]
        ground_truth = None
    else:
        built = build_scene(config.synthetic)
        bundle = built.bundle()
        images = [TrainingImage(pixels, view)
                  for pixels, view in zip(built.images, built.views)]
        ground_truth = built
    images = number_images(images)
    train_idx, test_idx = held_out_split(len(images),
                                         config.held_out_period)
    train = number_images([images[i] for i in train_idx])
    test = [images[i] for i in test_idx]
    if not train:
        raise ValueError("dataset leaves no training images after the split")
    return Dataset(images, train, test, init_gaussians(bundle), ground_truth)


def _workdir(config: RunConfig) -> Path:
    path = Path(config.workdir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _jobs(config: RunConfig) -> int:
    return max(1, int(os.environ.get("SPLATSURF_JOBS", config.jobs)))


def _load_checkpoint(path: Path, hint: str):
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run `{hint}` first")
    return GaussianScene.load(path)


def _restore_networks(config: RunConfig, sections: dict, num_train: int):
    appearance = mask_model = None
    if config.use_appearance and b"APPR" in sections:
        appearance = AppearanceModel(num_train, seed=config.seed)
        appearance.load_state_bytes(sections[b"APPR"])
    if config.use_masks and b"MASK" in sections:
        mask_model = TransientMaskModel(seed=config.seed)
        mask_model.load_state_bytes(sections[b"MASK"])
    return appearance, mask_model


def _network_sections(appearance, mask_model) -> dict:
    sections = {}
    if appearance is not None:
        sections[b"APPR"] = appearance.state_bytes()
    if mask_model is not None:
        sections[b"MASK"] = mask_model.state_bytes()
    return sections


def _build_partition(config: RunConfig, scene: GaussianScene, dataset):
    views = [img.view for img in dataset.train]
    blend = np.stack([gaussian_weight_totals(
        scene, v.downsampled(config.schedule.coarse_downsample),
        config.raster) for v in views])
    return build_partition(scene, views, config.partition,
                           blend_weights=blend, raster_config=config.raster)


def _fusion_masks(config: RunConfig, mask_model, images):
    if mask_model is None:
        return None
    return [mask_model(img.pixels).value for img in images]


def _result_scene(config: RunConfig, args):
    """Checkpoint to operate on: --scene override, else merged, else coarse."""
    workdir = _workdir(config)
    if getattr(args, "scene", None):
        return GaussianScene.load(args.scene)
    merged = workdir / "merged.splat"
    if merged.exists():
        return GaussianScene.load(merged)
    return _load_checkpoint(workdir / "coarse.splat",
                            "splatsurf reconstruct")


def cmd_coarse(args) -> int:
    config = load_config(args.config)
    workdir = _workdir(config)
    dataset = load_dataset(config)
    result = train_coarse(dataset.init_scene, dataset.train,
                          schedule=config.schedule, policy=config.densify,
                          weights=config.loss_weights,
                          use_appearance=config.use_appearance,
                          use_masks=config.use_masks, seed=config.seed,
                          log_path=workdir / "coarse_losses.csv",
                          config=config.raster)
    sections = _network_sections(result.appearance, result.mask_model)
    result.scene.save(workdir / "coarse.splat", sections)
    save_config(config, workdir / "config_used.json")
    print(f"coarse stage: {len(result.scene)} Gaussians after "
          f"{result.iterations} iterations -> {workdir / 'coarse.splat'}")
    return 0


def cmd_partition(args) -> int:
    config = load_config(args.config)
    workdir = _workdir(config)
    scene, _ = _load_checkpoint(workdir / "coarse.splat", "splatsurf coarse")
    dataset = load_dataset(config)
    partition = _build_partition(config, scene, dataset)
    partition.save_report(workdir / "partition.json")
    partition.save_svg(workdir / "partition.svg",
                       [img.view for img in dataset.train])
    print(f"partitioned into {len(partition.cells)} cells "
          f"-> {workdir / 'partition.json'}")
    return 0


def cmd_refine(args) -> int:
    config = load_config(args.config)
    workdir = _workdir(config)
    scene, sections = _load_checkpoint(workdir / "coarse.splat",
                                       "splatsurf coarse")
    dataset = load_dataset(config)
    partition = _build_partition(config, scene, dataset)
    by_id = {cell.id: cell for cell in partition.cells}
    if args.cell not in by_id:
        raise ValueError(f"cell {args.cell} not in partition; "
                         f"valid ids: {sorted(by_id)}")
    appearance, mask_model = _restore_networks(config, sections,
                                               len(dataset.train))
    cell = by_id[args.cell]
    result = refine_cell(scene, cell, dataset.train,
                         schedule=config.schedule, policy=config.densify,
                         weights=config.loss_weights, appearance=appearance,
                         mask_model=mask_model,
                         seed=config.seed + 1000 + cell.id,
                         log_path=workdir / f"cell_{cell.id:03d}_losses.csv",
                         config=config.raster)
    cells_dir = workdir / "cells"
    cells_dir.mkdir(exist_ok=True)
    out = cells_dir / f"cell_{cell.id:03d}.splat"
    result.scene.save(out)
    print(f"refined cell {cell.id}: {len(result.scene)} Gaussians -> {out}")
    return 0


def cmd_merge(args) -> int:
    config = load_config(args.config)
    workdir = _workdir(config)
    scene, sections = _load_checkpoint(workdir / "coarse.splat",
                                       "splatsurf coarse")
    dataset = load_dataset(config)
    partition = _build_partition(config, scene, dataset)
    scenes = {}
    for cell in partition.cells:
        path = workdir / "cells" / f"cell_{cell.id:03d}.splat"
        if not path.exists():
            raise FileNotFoundError(
                f"{path} not found; run `splatsurf refine --cell {cell.id}`"
                " first")
        scenes[cell.id], _ = GaussianScene.load(path)
    merged, report = merge_cells(partition.cells, scenes)
    merged.save(workdir / "merged.splat", sections)
    print(f"merged {len(partition.cells)} cells: {report.total} Gaussians "
          f"({report.dropped} dropped) -> {workdir / 'merged.splat'}")
    return 0


def cmd_mesh(args) -> int:
    config = load_config(args.config)
    workdir = _workdir(config)
    scene, sections = _result_scene(config, args)
    dataset = load_dataset(config)
    _, mask_model = _restore_networks(config, sections, len(dataset.train))
    views = [img.view for img in dataset.train]
    masks = _fusion_masks(config, mask_model, dataset.train)
    mesh = fuse_scene(scene, views, config.mesh, masks=masks,
                      raster_config=config.raster)
    mesh.save_ply(workdir / "mesh.ply")
    mesh.save_obj(workdir / "mesh.obj")
    print(f"fused mesh: {len(mesh.vertices)} vertices, "
          f"{len(mesh.triangles)} triangles -> {workdir / 'mesh.ply'}")
    return 0


def cmd_eval(args) -> int:
    config = load_config(args.config)
    workdir = _workdir(config)
    scene, _ = _result_scene(config, args)
    dataset = load_dataset(config)
    rows = evaluate_views(scene, dataset.test, config.raster)
    report = {
        "held_out": [row["view_id"] for row in rows],
        "psnr_mean": float(np.mean([row["psnr"] for row in rows])),
        "ssim_mean": float(np.mean([row["ssim"] for row in rows])),
        "views": rows,
        "geometry": None,
    }
    mesh_path = workdir / "mesh.ply"
    if dataset.ground_truth is not None and mesh_path.exists():
        mesh = load_ply(mesh_path)
        points, _ = dataset.ground_truth.gt_cloud()
        report["geometry"] = mesh_accuracy(mesh, points).as_dict()
    with open(workdir / "eval.json", "w") as fh:
        json.dump(report, fh, indent=2)
    with open(workdir / "eval_views.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["view_id", "psnr", "ssim"])
        for row in rows:
            writer.writerow([row["view_id"], f"{row['psnr']:.6f}",
                             f"{row['ssim']:.6f}"])
    print(f"evaluated {len(rows)} held-out views: "
          f"PSNR {report['psnr_mean']:.2f} dB, "
          f"SSIM {report['ssim_mean']:.4f} -> {workdir / 'eval.json'}")
    return 0


def cmd_render(args) -> int:
    config = load_config(args.config)
    workdir = _workdir(config)
    scene, sections = _result_scene(config, args)
    dataset = load_dataset(config)
    if not 0 <= args.view < len(dataset.images):
        raise ValueError(f"view {args.view} out of range; dataset has "
                         f"{len(dataset.images)} views")
    image = dataset.images[args.view]
    out = render(scene, image.view, config.raster)
    stem = workdir / f"render_{args.view:03d}"
    save_image(args.out or f"{stem}.png", np.clip(out.color, 0.0, 1.0))
    if args.dump_pfm:
        save_pfm(f"{stem}_color.pfm", out.color)
        save_pfm(f"{stem}_alpha.pfm", out.alpha)
        save_pfm(f"{stem}_normal.pfm", out.normal)
        save_pfm(f"{stem}_distance.pfm", out.plane_distance())
        save_pfm(f"{stem}_depth.pfm", out.depth)
    if args.mask_png:
        _, mask_model = _restore_networks(config, sections,
                                          len(dataset.train))
        if mask_model is None:
            raise ValueError("no transient mask model in the checkpoint")
        save_gray(f"{stem}_mask.png", mask_model(image.pixels).value)
    print(f"rendered view {args.view} -> {args.out or f'{stem}.png'}")
    return 0


def cmd_reconstruct(args) -> int:
    config = load_config(args.config)
    workdir = _workdir(config)
    dataset = load_dataset(config)
    save_config(config, workdir / "config_used.json")
    result = run_pipeline(dataset.init_scene, dataset.train,
                          schedule=config.schedule,
                          partition_config=config.partition,
                          policy=config.densify,
                          weights=config.loss_weights, jobs=_jobs(config),
                          seed=config.seed,
                          use_appearance=config.use_appearance,
                          use_masks=config.use_masks, workdir=workdir,
                          config=config.raster)
    sections = _network_sections(result.appearance, result.mask_model)
    result.coarse_result.scene.save(workdir / "coarse.splat", sections)
    masks = _fusion_masks(config, result.mask_model, dataset.train)
    mesh = fuse_scene(result.scene, [img.view for img in dataset.train],
                      config.mesh, masks=masks, raster_config=config.raster)
    mesh.save_ply(workdir / "mesh.ply")
    mesh.save_obj(workdir / "mesh.obj")
    print(f"reconstruction: {len(result.scene)} Gaussians in "
          f"{len(result.partition.cells)} cells, mesh with "
          f"{len(mesh.triangles)} triangles -> {workdir}")
    return cmd_eval(argparse.Namespace(config=args.config, scene=None))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatsurf",
        description="Planar-splat surface reconstruction pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="path to the JSON run configuration")
        p.set_defaults(func=func)
        return p

    add("reconstruct", cmd_reconstruct,
        "full pipeline: train, partition, refine, merge, mesh, eval")
    add("coarse", cmd_coarse, "train the coarse global model")
    add("partition", cmd_partition, "split the scene into cells")
    p = add("refine", cmd_refine, "fine-train one cell")
    p.add_argument("--cell", type=int, required=True, help="cell id")
    add("merge", cmd_merge, "merge refined cells")
    p = add("mesh", cmd_mesh, "fuse depth maps and extract a mesh")
    p.add_argument("--scene", help="checkpoint to mesh instead of merged")
    p = add("eval", cmd_eval, "metrics on held-out views")
    p.add_argument("--scene", help="checkpoint to evaluate instead of merged")
    p = add("render", cmd_render, "render one view")
    p.add_argument("--view", type=int, required=True, help="view id")
    p.add_argument("--out", help="output PNG path")
    p.add_argument("--dump-pfm", action="store_true",
                   help="also dump float maps (color, alpha, normal, "
                        "distance, depth) as PFM")
    p.add_argument("--mask-png", action="store_true",
                   help="also write the transient mask as grayscale PNG")
    p.add_argument("--scene", help="checkpoint to render instead of merged")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
