"""Diffusion-based automatic tooth arrangement on synthetic dental arches."""

__version__ = "0.1.0"

from .geometry import (
    JawModel,
    PointCloudSample,
    ToothLabel,
    ToothMesh,
    TransformParams,
    align_jaw,
    apply_transform,
    chamfer_per_tooth,
    distance_matrix,
    geometric_center,
    sample_points,
    se3_exp,
)

__all__ = [
    "JawModel",
    "PointCloudSample",
    "ToothLabel",
    "ToothMesh",
    "TransformParams",
    "align_jaw",
    "apply_transform",
    "chamfer_per_tooth",
    "distance_matrix",
    "geometric_center",
    "sample_points",
    "se3_exp",
    "__version__",
]
