"""One-off timing/threshold calibration for the end-to-end criterion."""

import time

import numpy as np

from splatsurf.colmap import init_gaussians
from splatsurf.metrics import held_out_split
from splatsurf.scene import TrainingImage
from splatsurf.synthetic import SyntheticConfig, build_scene
from splatsurf.trainer import TrainSchedule, number_images, train_coarse

t0 = time.time()
built = build_scene(SyntheticConfig(image_size=128, num_views=24))
print(f"build_scene: {time.time() - t0:.1f}s")

images = number_images([TrainingImage(px, v)
                        for px, v in zip(built.images, built.views)])
train_idx, test_idx = held_out_split(len(images))
train = number_images([images[i] for i in train_idx])
init = init_gaussians(built.bundle())
print(f"init gaussians: {len(init)}")

schedule = TrainSchedule(total_iterations=400, coarse_fraction=1.0,
                         geo_warmup=200)
t0 = time.time()
result = train_coarse(init, train, schedule=schedule, policy=None,
                      use_appearance=False, use_masks=False, seed=0)
dt = time.time() - t0
print(f"coarse 400 iters (200 geo): {dt:.1f}s -> {dt / 400 * 1000:.0f} ms/iter")
print(f"history tail: {result.history[-1]}")
