"""Adam optimization and density control for Gaussian scenes.

The optimizer keeps one moment pair per named parameter group so that
densification can remap rows (drop pruned Gaussians, append fresh ones)
without losing momentum on the survivors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .scene import GaussianScene, quat_to_rotmat

logger = logging.getLogger(__name__)

# parameter groups of a GaussianScene, in concatenation order
SCENE_PARAMS = ("positions", "log_scales", "rotations", "opacity_logits", "colors")


def exponential_lr(step: int, total: int, lr_init: float, lr_final: float) -> float:
    """Log-linear interpolation from lr_init to lr_final over total steps."""
    if total <= 0:
        return lr_final
    t = min(max(step / total, 0.0), 1.0)
    return lr_init * (lr_final / lr_init) ** t


class Adam:
    """Adam with per-name state so parameter groups evolve independently.

    ``lrs`` maps group name to default learning rate; ``update`` may override
    the rate per call (used for the position decay schedule).
    """

    def __init__(self, lrs: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-15):
        self.lrs = dict(lrs)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict = {}

    def update(self, name: str, value: np.ndarray, grad: np.ndarray,
               lr: float = None) -> np.ndarray:
        """One Adam step; returns the new value, never mutates the input."""
        if lr is None:
            lr = self.lrs[name]
        if name not in self.state:
            self.state[name] = [np.zeros_like(value), np.zeros_like(value), 0]
        m, v, t = self.state[name]
        t += 1
        m[:] = self.beta1 * m + (1.0 - self.beta1) * grad
        v[:] = self.beta2 * v + (1.0 - self.beta2) * grad * grad
        self.state[name][2] = t
        m_hat = m / (1.0 - self.beta1 ** t)
        v_hat = v / (1.0 - self.beta2 ** t)
        return value - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def remap_rows(self, names, keep_idx: np.ndarray, num_new: int) -> None:
        """Reindex first-axis state after densification.

        Kept rows carry their moments along; appended rows start cold.  Step
        counts are preserved so bias correction stays consistent.
        """
        for name in names:
            if name not in self.state:
                continue
            m, v, t = self.state[name]
            tail = (num_new,) + m.shape[1:]
            m = np.concatenate([m[keep_idx], np.zeros(tail)])
            v = np.concatenate([v[keep_idx], np.zeros(tail)])
            self.state[name] = [m, v, t]


@dataclass
class DensifyPolicy:
    """When and how aggressively to clone, split, and prune Gaussians."""

    interval: int = 100
    start_iteration: int = 500
    stop_fraction: float = 0.8           # of the phase in which it runs
    grad_threshold: float = 2e-4         # mean screen-space gradient norm
    opacity_floor: float = 5e-3
    max_scale_fraction: float = 0.1      # of the working-region diagonal
    split_factor: float = 1.6            # children shrink by this
    dense_fraction: float = 0.01         # scale above this extent -> split
    max_gaussians: int = 2_000_000

    def validate(self) -> None:
        if self.interval < 1:
            raise ValueError("interval must be >= 1")
        if not 0.0 < self.stop_fraction <= 1.0:
            raise ValueError("stop_fraction must be in (0, 1]")
        if self.grad_threshold < 0 or self.opacity_floor < 0:
            raise ValueError("thresholds must be non-negative")
        if self.split_factor <= 1.0:
            raise ValueError("split_factor must exceed 1")
        if self.max_gaussians < 1:
            raise ValueError("max_gaussians must be positive")

    def active(self, iteration: int, phase_total: int) -> bool:
        """True when this iteration ends a densification window."""
        if iteration < self.start_iteration:
            return False
        if iteration > self.stop_fraction * phase_total:
            return False
        return iteration % self.interval == 0


@dataclass
class DensifyReport:
    cloned: int = 0
    split: int = 0
    pruned: int = 0
    total: int = 0
    keep_idx: np.ndarray = field(default=None, repr=False)


def densify_and_prune(scene: GaussianScene, avg_grad: np.ndarray,
                      policy: DensifyPolicy, extent: float,
                      rng: np.random.Generator, adam: Adam = None,
                      keep_box: tuple = None) -> tuple:
    """One density-control pass; returns (new_scene, report).

    Prunes near-transparent, oversized, and out-of-box Gaussians, then
    clones small high-gradient ones in place and splits large ones into two
    children sampled from the parent's own distribution.  Optimizer moments
    follow the survivors; new rows start cold.
    """
    n = len(scene)
    if avg_grad.shape != (n,):
        raise ValueError("avg_grad must have one entry per Gaussian")
    scales = scene.scales
    prune = scene.opacities < policy.opacity_floor
    prune |= scales.max(axis=1) > policy.max_scale_fraction * extent
    if keep_box is not None:
        x_lo, x_hi, y_lo, y_hi = keep_box
        xy = scene.positions[:, :2]
        inside = ((xy[:, 0] >= x_lo) & (xy[:, 0] <= x_hi)
                  & (xy[:, 1] >= y_lo) & (xy[:, 1] <= y_hi))
        prune |= ~inside

    hot = (avg_grad >= policy.grad_threshold) & ~prune
    big = scales.max(axis=1) > policy.dense_fraction * extent
    split_mask = hot & big
    clone_mask = hot & ~big

    room = policy.max_gaussians - n
    if room <= 0:
        split_mask = np.zeros(n, dtype=bool)
        clone_mask = np.zeros(n, dtype=bool)
    else:
        # splits net +1 each, clones +1 each; trim clones first, then splits
        budget = int(split_mask.sum() + clone_mask.sum()) - room
        if budget > 0:
            clone_ids = np.flatnonzero(clone_mask)
            drop = clone_ids[max(clone_ids.size - budget, 0):]
            clone_mask[drop] = False
            budget -= drop.size
            if budget > 0:
                split_ids = np.flatnonzero(split_mask)
                split_mask[split_ids[split_ids.size - budget:]] = False

    keep_idx = np.flatnonzero(~prune & ~split_mask)
    clone_idx = np.flatnonzero(clone_mask)
    split_idx = np.flatnonzero(split_mask)

    parts = [scene.select(keep_idx)]
    if clone_idx.size:
        parts.append(scene.select(clone_idx))
    if split_idx.size:
        parts.append(_split_children(scene, split_idx, policy, rng))
    new_scene = parts[0] if len(parts) == 1 else GaussianScene.concatenate(parts)

    num_new = clone_idx.size + 2 * split_idx.size
    if adam is not None:
        adam.remap_rows(SCENE_PARAMS, keep_idx, num_new)

    for name in SCENE_PARAMS:
        if not np.isfinite(getattr(new_scene, name)).all():
            raise RuntimeError(f"non-finite {name} after densification")

    report = DensifyReport(cloned=int(clone_idx.size), split=int(split_idx.size),
                           pruned=int(prune.sum()), total=len(new_scene),
                           keep_idx=keep_idx)
    logger.info("densify: %d cloned, %d split, %d pruned -> %d gaussians",
                report.cloned, report.split, report.pruned, report.total)
    return new_scene, report


def _split_children(scene: GaussianScene, split_idx: np.ndarray,
                    policy: DensifyPolicy, rng: np.random.Generator
                    ) -> GaussianScene:
    """Two children per parent, positions drawn from the parent Gaussian."""
    parents = scene.select(split_idx)
    k = len(parents)
    rot = quat_to_rotmat(parents.rotations)
    scales = parents.scales
    z = rng.standard_normal((2, k, 3))
    # x = mean + R @ (scales * z), batched over both children
    offsets = (rot[None] @ (scales[None] * z)[..., None])[..., 0]
    children = GaussianScene.concatenate([parents.copy(), parents.copy()])
    children.positions = (parents.positions[None] + offsets).reshape(2 * k, 3)
    children.log_scales = np.tile(
        parents.log_scales - np.log(policy.split_factor), (2, 1))
    return children
