"""Shared value types: splats, cameras, images, depth maps, features, scene bundles.

Camera convention used everywhere in this package: x right, y down, z forward,
world-to-camera pose (R, t) with p_cam = R @ p_world + t, and pixel
(u, v) = (fx * X/Z + cx, fy * Y/Z + cy). Pixel index (ix, iy) samples the
continuous image coordinate (ix, iy) exactly.

All types are immutable values after construction and safe to share across
threads. Constructors validate their invariants and raise ValueError, so a
partially valid value is never observable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "GaussianPrimitive",
    "GaussianSet",
    "CameraModel",
    "ImageBuffer",
    "DepthMap",
    "FeatureMap",
    "PointCloud",
    "Frame",
    "SceneBundle",
    "validate_bundle",
]

_QUAT_NORM_TOL = 1e-9
_ROT_TOL = 1e-9


def _as_readonly(a: np.ndarray, dtype=np.float64) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class GaussianPrimitive:
    """One splat: center (m, world), per-axis standard deviations (m),
    unit quaternion (w, x, y, z), opacity in [0, 1], RGB color in [0, 1]."""

    center: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", _as_readonly(np.asarray(self.center).reshape(3)))
        object.__setattr__(self, "scale", _as_readonly(np.asarray(self.scale).reshape(3)))
        object.__setattr__(self, "rotation", _as_readonly(np.asarray(self.rotation).reshape(4)))
        object.__setattr__(self, "color", _as_readonly(np.asarray(self.color).reshape(3)))
        object.__setattr__(self, "opacity", float(self.opacity))
        if not np.all(np.isfinite(self.center)):
            raise ValueError("gaussian center must be finite")
        if not np.all(self.scale > 0) or not np.all(np.isfinite(self.scale)):
            raise ValueError("gaussian scale components must be positive and finite")
        if abs(np.linalg.norm(self.rotation) - 1.0) > _QUAT_NORM_TOL:
            raise ValueError("gaussian rotation must be a unit quaternion")
        if not (0.0 <= self.opacity <= 1.0):
            raise ValueError("gaussian opacity must lie in [0, 1]")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise ValueError("gaussian color components must lie in [0, 1]")


class GaussianSet:
    """A sequence of Gaussian primitives stored as flat arrays.

    Behaves like a read-only list of :class:`GaussianPrimitive` while keeping
    the per-field arrays contiguous for the renderer. ``centers`` is (N, 3),
    ``scales`` (N, 3), ``rotations`` (N, 4) unit quaternions wxyz,
    ``opacities`` (N,), ``colors`` (N, 3).
    """

    __slots__ = ("centers", "scales", "rotations", "opacities", "colors")

    def __init__(self, centers, scales, rotations, opacities, colors, validate: bool = True):
        self.centers = _as_readonly(np.asarray(centers, dtype=np.float64).reshape(-1, 3))
        n = self.centers.shape[0]
        self.scales = _as_readonly(np.asarray(scales, dtype=np.float64).reshape(n, 3))
        self.rotations = _as_readonly(np.asarray(rotations, dtype=np.float64).reshape(n, 4))
        self.opacities = _as_readonly(np.asarray(opacities, dtype=np.float64).reshape(n))
        self.colors = _as_readonly(np.asarray(colors, dtype=np.float64).reshape(n, 3))
        if validate and n:
            if not np.all(np.isfinite(self.centers)):
                raise ValueError("gaussian centers must be finite")
            if np.any(self.scales <= 0) or not np.all(np.isfinite(self.scales)):
                raise ValueError("gaussian scales must be positive and finite")
            norms = np.linalg.norm(self.rotations, axis=1)
            if np.max(np.abs(norms - 1.0)) > _QUAT_NORM_TOL:
                raise ValueError("gaussian rotations must be unit quaternions")
            if np.any(self.opacities < 0) or np.any(self.opacities > 1):
                raise ValueError("gaussian opacities must lie in [0, 1]")
            if np.any(self.colors < 0) or np.any(self.colors > 1):
                raise ValueError("gaussian colors must lie in [0, 1]")

    @staticmethod
    def from_primitives(prims: Sequence[GaussianPrimitive]) -> "GaussianSet":
        if len(prims) == 0:
            return GaussianSet.empty()
        return GaussianSet(
            np.stack([p.center for p in prims]),
            np.stack([p.scale for p in prims]),
            np.stack([p.rotation for p in prims]),
            np.array([p.opacity for p in prims]),
            np.stack([p.color for p in prims]),
        )

    @staticmethod
    def empty() -> "GaussianSet":
        z = np.zeros((0, 3))
        return GaussianSet(z, z, np.zeros((0, 4)), np.zeros(0), z, validate=False)

    def __len__(self) -> int:
        return self.centers.shape[0]

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            self.centers[i], self.scales[i], self.rotations[i], self.opacities[i], self.colors[i]
        )

    def __iter__(self) -> Iterator[GaussianPrimitive]:
        for i in range(len(self)):
            yield self[i]


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus rigid world-to-camera pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "fx", float(self.fx))
        object.__setattr__(self, "fy", float(self.fy))
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "rotation", _as_readonly(np.asarray(self.rotation).reshape(3, 3)))
        object.__setattr__(self, "translation", _as_readonly(np.asarray(self.translation).reshape(3)))
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be at least 1")
        err = rotation_error(self.rotation)
        if err > _ROT_TOL:
            raise ValueError(f"rotation is not orthonormal with det +1 (error {err:.3e})")
        if not np.all(np.isfinite(self.translation)):
            raise ValueError("translation must be finite")

    @staticmethod
    def unchecked(fx, fy, cx, cy, width, height, rotation, translation) -> "CameraModel":
        """Build without invariant checks. For loaders that stage raw records
        before validation; `validate_bundle` reports any violations."""
        cam = object.__new__(CameraModel)
        object.__setattr__(cam, "fx", float(fx))
        object.__setattr__(cam, "fy", float(fy))
        object.__setattr__(cam, "cx", float(cx))
        object.__setattr__(cam, "cy", float(cy))
        object.__setattr__(cam, "width", int(width))
        object.__setattr__(cam, "height", int(height))
        object.__setattr__(cam, "rotation", _as_readonly(np.asarray(rotation).reshape(3, 3)))
        object.__setattr__(cam, "translation", _as_readonly(np.asarray(translation).reshape(3)))
        return cam

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates, -R^T t."""
        return -self.rotation.T @ self.translation

    def resolution(self) -> tuple[int, int]:
        return self.height, self.width

    def scaled(self, factor: float) -> "CameraModel":
        """Same pose viewed at a resolution scaled by ``factor`` in (0, 1]."""
        if not (0.0 < factor <= 1.0):
            raise ValueError("scale factor must lie in (0, 1]")
        w = max(1, int(round(self.width * factor)))
        h = max(1, int(round(self.height * factor)))
        sx, sy = w / self.width, h / self.height
        return CameraModel(
            self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy,
            w, h, self.rotation, self.translation,
        )


def rotation_error(r: np.ndarray) -> float:
    """Deviation of a 3x3 matrix from a proper rotation (orthonormality plus det +1)."""
    r = np.asarray(r, dtype=np.float64)
    ortho = float(np.max(np.abs(r @ r.T - np.eye(3))))
    return max(ortho, abs(float(np.linalg.det(r)) - 1.0))


@dataclass(frozen=True)
class ImageBuffer:
    """RGB image with float values in [0, 1], stored row-major as (H, W, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError("image pixels must have shape (H, W, 3)")
        if not np.all(np.isfinite(px)):
            raise ValueError("image values must be finite")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        object.__setattr__(self, "pixels", _as_readonly(px))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return 3

    @property
    def data(self) -> np.ndarray:
        return self.pixels.reshape(-1)


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel metric depth (camera-frame Z, meters) with a validity mask."""

    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        v = np.asarray(self.valid, dtype=bool)
        if d.ndim != 2 or v.shape != d.shape:
            raise ValueError("depth and valid must be matching 2-d arrays")
        if np.any(~np.isfinite(d[v])) or np.any(d[v] <= 0):
            raise ValueError("every valid depth must be positive and finite")
        object.__setattr__(self, "depth", _as_readonly(d))
        object.__setattr__(self, "valid", _as_readonly(v, dtype=bool))

    @staticmethod
    def unchecked(depth, valid) -> "DepthMap":
        """Build without the positive-depth check; see `CameraModel.unchecked`."""
        m = object.__new__(DepthMap)
        object.__setattr__(m, "depth", _as_readonly(np.asarray(depth, dtype=np.float64)))
        object.__setattr__(m, "valid", _as_readonly(np.asarray(valid), dtype=bool))
        return m

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]


@dataclass(frozen=True)
class FeatureMap:
    """Per-pixel feature vectors, stored as (H, W, dim)."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3:
            raise ValueError("feature data must have shape (H, W, dim)")
        if not np.all(np.isfinite(d)):
            raise ValueError("feature values must be finite")
        object.__setattr__(self, "data", _as_readonly(d))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class PointCloud:
    """World-space points with RGB colors in [0, 1]."""

    positions: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        c = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if c.shape[0] != p.shape[0]:
            raise ValueError("positions and colors must have matching length")
        object.__setattr__(self, "positions", _as_readonly(p))
        object.__setattr__(self, "colors", _as_readonly(c))

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class Frame:
    """One captured frame: image, camera, depth and per-pixel features."""

    image: ImageBuffer
    camera: CameraModel
    depth: DepthMap
    features: FeatureMap


@dataclass(frozen=True)
class SceneBundle:
    """An ordered capture sequence plus its reconstruction point cloud.

    ``frame_range`` is the inclusive (first, last) frame index pair; its span
    must match the number of frames.
    """

    frames: tuple[Frame, ...]
    point_cloud: PointCloud
    frame_range: tuple[int, int] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        if self.frame_range is None:
            object.__setattr__(self, "frame_range", (0, len(frames) - 1))
        k_f, k_l = self.frame_range
        if k_f > k_l:
            raise ValueError("frame_range must satisfy first <= last")
        if k_l - k_f + 1 != len(frames):
            raise ValueError("frame_range span must equal the frame count")

    @property
    def k_first(self) -> int:
        return self.frame_range[0]

    @property
    def k_last(self) -> int:
        return self.frame_range[1]

    def __len__(self) -> int:
        return len(self.frames)

    def resolution(self) -> tuple[int, int]:
        return self.frames[0].image.height, self.frames[0].image.width


def validate_bundle(bundle: SceneBundle) -> list[str]:
    """Check every type invariant across a bundle; returns one description per
    violation and never raises. An empty list means the bundle is well formed."""
    issues: list[str] = []
    if len(bundle.frames) == 0:
        issues.append("bundle has no frames")
        return issues
    h, w = bundle.resolution()
    for idx, fr in enumerate(bundle.frames):
        tag = f"frame {bundle.k_first + idx}"
        if (fr.image.height, fr.image.width) != (h, w):
            issues.append(f"{tag}: image resolution {fr.image.height}x{fr.image.width} != {h}x{w}")
        if (fr.depth.height, fr.depth.width) != (h, w):
            issues.append(f"{tag}: depth resolution differs from bundle resolution")
        if (fr.features.height, fr.features.width) != (h, w):
            issues.append(f"{tag}: feature resolution differs from bundle resolution")
        if fr.camera.width != w or fr.camera.height != h:
            issues.append(f"{tag}: camera reports {fr.camera.width}x{fr.camera.height}, expected {w}x{h}")
        err = rotation_error(fr.camera.rotation)
        if err > _ROT_TOL:
            issues.append(f"{tag}: camera rotation not orthonormal (error {err:.3e})")
        if fr.camera.fx <= 0 or fr.camera.fy <= 0:
            issues.append(f"{tag}: camera focal lengths must be positive")
        bad = fr.depth.valid & ~(np.isfinite(fr.depth.depth) & (fr.depth.depth > 0))
        if np.any(bad):
            ys, xs = np.nonzero(bad)
            issues.append(
                f"{tag}: {bad.sum()} valid pixel(s) with non-positive depth, first at (x={xs[0]}, y={ys[0]})"
            )
        px = fr.image.pixels
        if np.any(px < 0) or np.any(px > 1) or not np.all(np.isfinite(px)):
            issues.append(f"{tag}: image values outside [0, 1]")
        if not np.all(np.isfinite(fr.features.data)):
            issues.append(f"{tag}: non-finite feature values")
    if len(bundle.point_cloud) and not np.all(np.isfinite(bundle.point_cloud.positions)):
        issues.append("point cloud contains non-finite positions")
    return issues
