"""Coarse-to-fine optimization driver.

Training happens in two phases that share one iteration budget: a coarse
pass fits the whole scene against downsampled images, then each partition
cell refines its own Gaussians against full-resolution sub-images.  Cells
run independently (optionally in parallel) and are merged by position at
the end, so results never depend on scheduling order.
"""

from __future__ import annotations

import logging
import os
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .images import rgb_to_gray
from .losses import (GeoLossWeights, LossLog, NonFiniteLossError, ViewPair,
                     depth_normal_loss, flatten_loss, mask_reg_loss,
                     masked_rgb_loss, mv_geometric_loss, mv_photometric_loss,
                     select_view_pairs, textureless_loss, total_loss)
from .networks import AppearanceModel, TransientMaskModel
from .optim import (Adam, DensifyPolicy, SCENE_PARAMS, densify_and_prune,
                    exponential_lr)
from .partition import PartitionConfig, PartitionResult, build_partition
from .raster import (RasterConfig, RenderUpstream, gaussian_weight_totals,
                     render, render_backward)
from .scene import CameraView, GaussianScene, TrainingImage

logger = logging.getLogger(__name__)

LOSS_TERMS = ("rgb", "mask_reg", "flatten", "consistency",
              "multi_view_geometric", "multi_view_photometric", "textureless")

# renders with no usable coverage are skipped rather than optimized
ALPHA_SKIP = 1e-3


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries the last-good state."""

    def __init__(self, message: str, step: int, scene: GaussianScene,
                 appearance_state: bytes = None, mask_state: bytes = None):
        super().__init__(message)
        self.step = step
        self.scene = scene
        self.appearance_state = appearance_state
        self.mask_state = mask_state


def _power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class TrainSchedule:
    """Iteration budget and learning rates for both phases.

    The position rate decays exponentially over each phase and is scaled by
    the working-region diagonal so steps stay proportionate to the scene.
    """

    total_iterations: int = 30000
    coarse_fraction: float = 0.5
    coarse_downsample: int = 4
    subimage_grid: int = 2
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_network: float = 1e-3
    geo_warmup: int = 1000
    checkpoint_interval: int = 500

    @property
    def coarse_iterations(self) -> int:
        return round(self.total_iterations * self.coarse_fraction)

    @property
    def fine_iterations(self) -> int:
        return self.total_iterations - self.coarse_iterations

    def validate(self) -> None:
        if self.total_iterations < 0:
            raise ValueError("total_iterations must be non-negative")
        if not 0.0 <= self.coarse_fraction <= 1.0:
            raise ValueError("coarse_fraction must lie in [0, 1]")
        if not _power_of_two(self.coarse_downsample):
            raise ValueError("coarse_downsample must be a power of two")
        if not _power_of_two(self.subimage_grid):
            raise ValueError("subimage_grid must be a power of two")
        for name in ("lr_position", "lr_position_final", "lr_scale",
                     "lr_rotation", "lr_opacity", "lr_color", "lr_network"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.geo_warmup < 0:
            raise ValueError("geo_warmup must be non-negative")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")


def split_view(view: CameraView, grid: int = 2) -> list:
    """Tile a view into grid x grid sub-views, row-major.

    Each sub-view shifts the principal point by its tile origin and extends
    ``crop_origin`` so rendering it equals cropping the full render
    bit-exactly.  Odd dimensions give the extra row/column to the trailing
    tile.
    """
    xs = [view.width * i // grid for i in range(grid + 1)]
    ys = [view.height * i // grid for i in range(grid + 1)]
    subs = []
    for ty in range(grid):
        for tx in range(grid):
            x0, y0 = xs[tx], ys[ty]
            K = view.intrinsics.copy()
            K[0, 2] -= x0
            K[1, 2] -= y0
            subs.append(replace(
                view, intrinsics=K, width=xs[tx + 1] - x0,
                height=ys[ty + 1] - y0,
                crop_origin=(view.crop_origin[0] + x0,
                             view.crop_origin[1] + y0)))
    return subs


def split_image(image: TrainingImage, grid: int = 2) -> list:
    """Tile a training image along with its view; see split_view."""
    views = split_view(image.view, grid)
    out = []
    for sub in views:
        x0 = sub.crop_origin[0] - image.view.crop_origin[0]
        y0 = sub.crop_origin[1] - image.view.crop_origin[1]
        out.append(TrainingImage(
            pixels=image.pixels[y0:y0 + sub.height, x0:x0 + sub.width],
            view=sub, downsample_level=image.downsample_level))
    return out


def number_images(images) -> list:
    """Give images sequential view and embedding ids."""
    out = []
    for i, img in enumerate(images):
        view = replace(img.view, view_id=i, embedding_id=i)
        out.append(replace(img, view=view))
    return out


def _ensure_ids(images) -> list:
    ids = [img.view.embedding_id for img in images]
    if len(set(ids)) == len(images):
        return list(images)
    logger.info("assigning sequential embedding ids to %d images", len(images))
    return number_images(images)


@dataclass
class TrainResult:
    scene: GaussianScene
    appearance: AppearanceModel = None
    mask_model: TransientMaskModel = None
    iterations: int = 0
    skipped: int = 0
    densify_events: list = field(default_factory=list)
    history: list = field(default_factory=list)   # one dict per logged step


class _Phase:
    """One optimization phase over a fixed list of training images."""

    def __init__(self, scene: GaussianScene, images, references: dict,
                 schedule: TrainSchedule, policy, weights: GeoLossWeights,
                 appearance, mask_model, extent: float, keep_box, rng,
                 config: RasterConfig, log_path=None):
        self.scene = scene
        self.images = images
        self.references = references
        self.schedule = schedule
        self.policy = policy
        self.weights = weights
        self.appearance = appearance
        self.mask_model = mask_model
        self.extent = float(extent)
        self.keep_box = keep_box
        self.rng = rng
        self.config = config
        self.log_path = log_path
        self.adam = Adam({"positions": schedule.lr_position,
                          "log_scales": schedule.lr_scale,
                          "rotations": schedule.lr_rotation,
                          "opacity_logits": schedule.lr_opacity,
                          "colors": schedule.lr_color})
        self.skipped = 0
        self.densify_events = []
        self.history = []
        self._accum = np.zeros(len(scene))
        self._count = np.zeros(len(scene))

    def run(self, iterations: int) -> None:
        if iterations <= 0 or not self.images:
            return
        num = len(self.images)
        order = None
        checkpoint = self._take_checkpoint(0)
        log = LossLog(self.log_path, LOSS_TERMS) if self.log_path else None
        try:
            for i in range(iterations):
                step = i + 1
                if i % num == 0:
                    order = self.rng.permutation(num)
                idx = int(order[i % num])
                refs = self.references.get(idx)
                ref_image = None
                if refs:
                    ref_image = self.images[refs[(i // num) % len(refs)]]
                try:
                    outcome = self._step(step, iterations, self.images[idx],
                                         ref_image)
                except NonFiniteLossError as err:
                    self._restore_checkpoint(checkpoint)
                    raise TrainingDiverged(
                        f"training diverged at iteration {step}: {err}",
                        step=checkpoint[0], scene=checkpoint[1],
                        appearance_state=checkpoint[2],
                        mask_state=checkpoint[3]) from err
                if outcome is None:
                    self.skipped += 1
                else:
                    total_value, terms = outcome
                    record = {"iteration": step, "total": total_value, **terms}
                    self.history.append(record)
                    if log:
                        log.append(step, terms, total_value)
                if self.policy is not None and self.policy.active(step,
                                                                  iterations):
                    avg = self._accum / np.maximum(self._count, 1.0)
                    self.scene, report = densify_and_prune(
                        self.scene, avg, self.policy, self.extent, self.rng,
                        self.adam, self.keep_box)
                    self.densify_events.append(report)
                    self._accum = np.zeros(len(self.scene))
                    self._count = np.zeros(len(self.scene))
                if step % self.schedule.checkpoint_interval == 0:
                    checkpoint = self._take_checkpoint(step)
        finally:
            if log:
                log.close()

    def _take_checkpoint(self, step: int):
        app = self.appearance.state_bytes() if self.appearance else None
        mask = self.mask_model.state_bytes() if self.mask_model else None
        return (step, self.scene.copy(), app, mask)

    def _restore_checkpoint(self, checkpoint) -> None:
        step, scene, app, mask = checkpoint
        self.scene = scene.copy()
        if self.appearance is not None and app is not None:
            self.appearance.load_state_bytes(app)
        if self.mask_model is not None and mask is not None:
            self.mask_model.load_state_bytes(mask)
        logger.warning("restored training state from iteration %d", step)

    def _step(self, step: int, phase_total: int, image: TrainingImage,
              ref_image):
        """Render, assemble the loss, and apply one optimizer update.

        Returns (total, term values) or None when the render has no
        coverage and the iteration is skipped.
        """
        out = render(self.scene, image.view, self.config)
        if out.alpha.max() < ALPHA_SKIP:
            logger.warning("view %d renders empty; skipping iteration %d",
                           image.view.view_id, step)
            return None
        color = ad.parameter(out.color)
        normal = ad.parameter(out.normal)
        depth = ad.parameter(out.depth)
        log_scales = ad.parameter(self.scene.log_scales)

        if self.appearance is not None:
            _, transformed = self.appearance(color, image.view.embedding_id)
        else:
            transformed = color
        if self.mask_model is not None:
            mask = self.mask_model(image.pixels)
            mask_np = mask.value
        else:
            mask = ad.as_tensor(np.ones(out.alpha.shape))
            mask_np = mask.value

        terms = {"rgb": masked_rgb_loss(color, transformed, image.pixels,
                                        mask),
                 "flatten": flatten_loss(log_scales)}
        if self.mask_model is not None:
            terms["mask_reg"] = mask_reg_loss(mask)

        ref_out = None
        ref_depth = ref_normal = None
        if step > self.schedule.geo_warmup:
            gray = rgb_to_gray(image.pixels)
            valid = out.valid_depth & (mask_np > 0.5)
            terms["consistency"] = depth_normal_loss(depth, normal, valid,
                                                     gray, image.view)
            terms["textureless"] = textureless_loss(gray, depth, valid)
            if ref_image is not None:
                ref_out = render(self.scene, ref_image.view, self.config)
                if ref_out.alpha.max() < ALPHA_SKIP:
                    ref_out = None
            if ref_out is not None:
                ref_depth = ad.parameter(ref_out.depth)
                ref_normal = ad.parameter(ref_out.normal)
                pair = ViewPair.from_views(image.view, ref_image.view)
                geo, _ = mv_geometric_loss(pair, depth, normal, valid,
                                           ref_depth, ref_normal,
                                           ref_out.valid_depth)
                photo, _ = mv_photometric_loss(
                    pair, gray, rgb_to_gray(ref_image.pixels), depth, normal,
                    valid, mask_s=mask_np)
                terms["multi_view_geometric"] = geo
                terms["multi_view_photometric"] = photo

        total = total_loss(self.weights, **terms)
        total.backward()

        grads = render_backward(self.scene, out, RenderUpstream(
            color=color.grad, normal=normal.grad, depth=depth.grad))
        if ref_out is not None and (ref_depth.grad is not None
                                    or ref_normal.grad is not None):
            ref_grads = render_backward(self.scene, ref_out, RenderUpstream(
                normal=ref_normal.grad, depth=ref_depth.grad))
            for name in SCENE_PARAMS:
                getattr(grads, name).__iadd__(getattr(ref_grads, name))
            grads.screen_positions += ref_grads.screen_positions
        if log_scales.grad is not None:
            grads.log_scales += log_scales.grad

        self._apply(step, phase_total, grads)
        norms = np.linalg.norm(grads.screen_positions, axis=1)
        self._accum += norms
        self._count += norms > 0
        values = {name: float(ad.as_tensor(t).value)
                  for name, t in terms.items()}
        return float(total.value), values

    def _apply(self, step: int, phase_total: int, grads) -> None:
        lr_pos = exponential_lr(step, phase_total,
                                self.schedule.lr_position * self.extent,
                                self.schedule.lr_position_final * self.extent)
        for name in SCENE_PARAMS:
            lr = lr_pos if name == "positions" else None
            setattr(self.scene, name,
                    self.adam.update(name, getattr(self.scene, name),
                                     getattr(grads, name), lr=lr))
        self.scene.normalize_rotations()
        for tag, model in (("app", self.appearance), ("mask",
                                                      self.mask_model)):
            if model is None:
                continue
            for pname, p in model.parameters().items():
                if p.grad is None:
                    continue
                p.value = self.adam.update(f"{tag}.{pname}", p.value, p.grad,
                                           lr=self.schedule.lr_network)
            model.zero_grad()


def _reference_map(views) -> dict:
    refs = defaultdict(list)
    for s, r in select_view_pairs(views):
        refs[s].append(r)
    return dict(refs)


def train_coarse(scene: GaussianScene, images, schedule: TrainSchedule = None,
                 policy: DensifyPolicy = None, weights: GeoLossWeights = None,
                 use_appearance: bool = True, use_masks: bool = True,
                 appearance: AppearanceModel = None,
                 mask_model: TransientMaskModel = None, seed: int = 0,
                 log_path=None, config: RasterConfig = None) -> TrainResult:
    """Fit the whole scene against downsampled images.

    Runs the full loss for the coarse share of the iteration budget, one
    image per iteration in uniformly shuffled epochs, densifying per policy
    (pass None to disable).  A non-finite loss aborts with the last-good
    checkpoint attached to the exception.
    """
    schedule = schedule or TrainSchedule()
    schedule.validate()
    if policy is not None:
        policy.validate()
    images = _ensure_ids(images)
    train_images = [img.downsampled(schedule.coarse_downsample)
                    for img in images]
    if not use_appearance:
        appearance = None
    elif appearance is None:
        appearance = AppearanceModel(len(images), seed=seed)
    if not use_masks:
        mask_model = None
    elif mask_model is None:
        mask_model = TransientMaskModel(seed=seed)
    phase = _Phase(scene.copy(), train_images,
                   _reference_map([img.view for img in train_images]),
                   schedule, policy, weights or GeoLossWeights(), appearance,
                   mask_model, scene.bounds().diagonal, None,
                   np.random.default_rng(seed), config or RasterConfig(),
                   log_path)
    phase.run(schedule.coarse_iterations)
    return TrainResult(scene=phase.scene, appearance=appearance,
                       mask_model=mask_model,
                       iterations=schedule.coarse_iterations,
                       skipped=phase.skipped,
                       densify_events=phase.densify_events,
                       history=phase.history)


def refine_cell(scene: GaussianScene, cell, images,
                schedule: TrainSchedule = None, policy: DensifyPolicy = None,
                weights: GeoLossWeights = None,
                appearance: AppearanceModel = None,
                mask_model: TransientMaskModel = None, seed: int = 0,
                log_path=None, config: RasterConfig = None,
                iterations: int = None) -> TrainResult:
    """Refine one partition cell's Gaussians on full-resolution sub-images.

    Only the cell's own Gaussians are optimized, against sub-images of its
    assigned views, with densification confined to the expanded box.
    Networks are cloned so concurrent cells never share mutable state.
    """
    schedule = schedule or TrainSchedule()
    schedule.validate()
    if policy is not None:
        policy.validate()
    if iterations is None:
        iterations = schedule.fine_iterations
    sub_scene = scene.select(np.asarray(cell.gaussian_ids, dtype=np.int64))
    appearance = appearance.clone() if appearance is not None else None
    mask_model = mask_model.clone() if mask_model is not None else None
    if len(sub_scene) == 0:
        logger.warning("cell %d holds no Gaussians; skipping refinement",
                       cell.id)
        return TrainResult(scene=sub_scene, appearance=appearance,
                           mask_model=mask_model)
    cell_images = [images[i] for i in cell.image_ids]
    grid = schedule.subimage_grid
    per_image = grid * grid
    subs = []
    for img in cell_images:
        subs.extend(split_image(img, grid))
    # sub-images pair with the same tile of their parent's paired view
    references = {}
    for s, r_list in _reference_map([img.view for img in cell_images]).items():
        for q in range(per_image):
            references[s * per_image + q] = [r * per_image + q
                                             for r in r_list]
    try:
        corners = cell.box_corners()
        extent = float(np.linalg.norm(corners[7] - corners[0]))
    except ValueError:
        x_lo, x_hi, y_lo, y_hi = cell.expanded
        extent = float(np.hypot(x_hi - x_lo, y_hi - y_lo))
    phase = _Phase(sub_scene, subs, references, schedule, policy,
                   weights or GeoLossWeights(), appearance, mask_model,
                   extent, cell.expanded, np.random.default_rng(seed),
                   config or RasterConfig(), log_path)
    phase.run(iterations)
    return TrainResult(scene=phase.scene, appearance=appearance,
                       mask_model=mask_model, iterations=iterations,
                       skipped=phase.skipped,
                       densify_events=phase.densify_events,
                       history=phase.history)


@dataclass
class MergeReport:
    kept_per_cell: dict
    dropped: int          # drifted outside every base rectangle
    out_of_cell: int      # drifted into another cell's territory
    total: int


def _in_rect(xy: np.ndarray, rect) -> np.ndarray:
    x_lo, x_hi, y_lo, y_hi = rect
    return ((xy[:, 0] >= x_lo) & (xy[:, 0] <= x_hi)
            & (xy[:, 1] >= y_lo) & (xy[:, 1] <= y_hi))


def merge_cells(cells, scenes: dict) -> tuple:
    """Concatenate refined cells, keeping each Gaussian in one cell only.

    A cell contributes the Gaussians inside its base (unexpanded)
    rectangle; positions on a shared edge belong to the lower-id cell.
    Gaussians that drifted outside every base rectangle are dropped and
    counted.  Returns (merged scene, MergeReport).
    """
    order = sorted(cells, key=lambda c: c.id)
    parts, kept_per_cell = [], {}
    dropped = out_of_cell = 0
    for i, cell in enumerate(order):
        scn = scenes[cell.id]
        xy = scn.positions[:, :2]
        inside_own = _in_rect(xy, cell.rect)
        lower = np.zeros(len(scn), dtype=bool)
        for other in order[:i]:
            lower |= _in_rect(xy, other.rect)
        keep = inside_own & ~lower
        anywhere = inside_own.copy()
        for other in order:
            if other.id != cell.id:
                anywhere |= _in_rect(xy, other.rect)
        dropped += int((~anywhere).sum())
        out_of_cell += int((~inside_own & anywhere).sum())
        kept_per_cell[cell.id] = int(keep.sum())
        parts.append(scn.select(np.flatnonzero(keep)))
    merged = GaussianScene.concatenate(parts)
    report = MergeReport(kept_per_cell=kept_per_cell, dropped=dropped,
                         out_of_cell=out_of_cell, total=len(merged))
    logger.info("merged %d cells into %d gaussians (%d dropped, %d strayed)",
                len(order), report.total, dropped, out_of_cell)
    return merged, report


@dataclass
class PipelineResult:
    scene: GaussianScene
    coarse_result: TrainResult
    partition: PartitionResult
    cell_results: dict
    merge_report: MergeReport

    @property
    def appearance(self):
        return self.coarse_result.appearance

    @property
    def mask_model(self):
        return self.coarse_result.mask_model


def run_pipeline(scene: GaussianScene, images,
                 schedule: TrainSchedule = None,
                 partition_config: PartitionConfig = None,
                 policy: DensifyPolicy = None,
                 weights: GeoLossWeights = None, jobs: int = None,
                 seed: int = 0, use_appearance: bool = True,
                 use_masks: bool = True, workdir=None,
                 config: RasterConfig = None) -> PipelineResult:
    """Coarse training, partitioning, parallel refinement, and merging.

    ``jobs`` caps concurrent cell refinements (env SPLATSURF_JOBS when
    unset); results are bit-identical at any parallelism because every
    cell derives its randomness from its own id.
    """
    schedule = schedule or TrainSchedule()
    schedule.validate()
    if jobs is None:
        jobs = int(os.environ.get("SPLATSURF_JOBS", "1"))
    jobs = max(1, jobs)
    workdir = Path(workdir) if workdir is not None else None
    if workdir is not None:
        workdir.mkdir(parents=True, exist_ok=True)
    images = _ensure_ids(images)

    coarse_log = workdir / "coarse_losses.csv" if workdir else None
    coarse = train_coarse(scene, images, schedule, policy, weights,
                          use_appearance=use_appearance, use_masks=use_masks,
                          seed=seed, log_path=coarse_log, config=config)

    views = [img.view for img in images]
    raster_config = config or RasterConfig()
    blend = np.stack([gaussian_weight_totals(
        coarse.scene, v.downsampled(schedule.coarse_downsample),
        raster_config) for v in views])
    partition = build_partition(coarse.scene, views, partition_config,
                                blend_weights=blend,
                                raster_config=raster_config)
    if workdir is not None:
        partition.save_report(workdir / "partition.json")
        partition.save_svg(workdir / "partition.svg", views)

    def _refine(cell):
        log = (workdir / f"cell_{cell.id:03d}_losses.csv"
               if workdir else None)
        result = refine_cell(coarse.scene, cell, images, schedule, policy,
                             weights, appearance=coarse.appearance,
                             mask_model=coarse.mask_model,
                             seed=seed + 1000 + cell.id, log_path=log,
                             config=config)
        return cell.id, result

    cell_results = {}
    if jobs == 1 or len(partition.cells) <= 1:
        for cell in partition.cells:
            cid, result = _refine(cell)
            cell_results[cid] = result
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for cid, result in pool.map(_refine, partition.cells):
                cell_results[cid] = result

    merged, report = merge_cells(
        partition.cells, {cid: r.scene for cid, r in cell_results.items()})
    if workdir is not None:
        sections = {}
        if coarse.appearance is not None:
            sections[b"APPR"] = coarse.appearance.state_bytes()
        if coarse.mask_model is not None:
            sections[b"MASK"] = coarse.mask_model.state_bytes()
        merged.save(workdir / "merged.splat", sections)
    return PipelineResult(scene=merged, coarse_result=coarse,
                          partition=partition, cell_results=cell_results,
                          merge_report=report)
