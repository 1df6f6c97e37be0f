"""Street-scene novel view synthesis from single-lane captures.

Per-pixel Gaussian splats decoded from depth and learnable features, a
differentiable tile-based rasterizer, confidence-gated MVS depth refinement,
and virtual-lane cycle training that makes adjacent-lane rendering work
without multi-lane data.
"""

__version__ = "0.1.0"

from .scene import (
    CameraModel,
    DepthMap,
    FeatureMap,
    Frame,
    GaussianPrimitive,
    GaussianSet,
    ImageBuffer,
    PointCloud,
    SceneBundle,
    validate_bundle,
)

__all__ = [
    "CameraModel",
    "DepthMap",
    "FeatureMap",
    "Frame",
    "GaussianPrimitive",
    "GaussianSet",
    "ImageBuffer",
    "PointCloud",
    "SceneBundle",
    "validate_bundle",
    "__version__",
]
