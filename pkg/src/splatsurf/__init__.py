"""Desk-scale surface reconstruction with planar Gaussian splatting.

The package trains a flattened-Gaussian scene representation against posed
images, regularizes its geometry with multi-view and single-view constraints,
and extracts a triangle mesh through TSDF fusion.  Everything runs on the CPU
in double precision and is bit-reproducible for a fixed seed.
"""

__version__ = "0.1.0"

from splatsurf.scene import CameraView, GaussianScene, SceneBounds, TrainingImage

__all__ = [
    "CameraView",
    "GaussianScene",
    "SceneBounds",
    "TrainingImage",
    "__version__",
]
