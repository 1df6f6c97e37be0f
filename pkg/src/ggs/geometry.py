"""Camera projection, back-projection and virtual lane pose generation.

A "virtual lane" is a laterally shifted copy of the captured trajectory. The
shift is applied along the camera-frame x axis (lane-perpendicular), never in
the world frame, so curved trajectories stay lane-parallel. The per-frame
shift magnitude follows a sinusoidal schedule clamped to a corridor bound.

Sign convention: a positive lateral offset translates camera coordinates by
+x, which moves the camera center itself toward -x (the driver's left when
facing +z with x pointing right).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import CameraModel, ImageBuffer

__all__ = [
    "LaneSwitchConfig",
    "BehindCameraError",
    "InvalidDepthError",
    "CorridorViolationError",
    "back_project",
    "project",
    "project_points",
    "back_project_grid",
    "lane_offset_schedule",
    "make_virtual_pose",
    "virtual_lane_converter",
]


class InvalidDepthError(ValueError):
    pass


class BehindCameraError(ValueError):
    pass


class CorridorViolationError(ValueError):
    pass


@dataclass(frozen=True)
class LaneSwitchConfig:
    """Virtual-lane schedule: offset(k) = clamp(gamma * sin(omega * k), +-max_offset)
    for frame indices k in [k_first, k_last]."""

    gamma: float = 3.0
    omega: float = np.pi / 4
    k_first: int = 0
    k_last: int = 0
    max_offset: float = 3.0

    def __post_init__(self):
        if not np.isfinite(self.gamma):
            raise ValueError("gamma must be finite")
        if self.max_offset < 0:
            raise ValueError("max_offset must be non-negative")
        if self.k_first > self.k_last:
            raise ValueError("k_first must not exceed k_last")


def back_project(pixel, depth: float, camera: CameraModel) -> np.ndarray:
    """Lift a pixel at a given metric depth to a world-space point."""
    if not (depth > 0 and np.isfinite(depth)):
        raise InvalidDepthError(f"depth must be positive and finite, got {depth}")
    u, v = float(pixel[0]), float(pixel[1])
    ray = np.array([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0])
    p_cam = ray * float(depth)
    return camera.rotation.T @ (p_cam - camera.translation)


def project(point, camera: CameraModel) -> tuple[np.ndarray, float]:
    """Project a world point; returns (pixel, depth) with depth the camera-frame Z."""
    p_cam = camera.rotation @ np.asarray(point, dtype=np.float64).reshape(3) + camera.translation
    z = float(p_cam[2])
    if z <= 0:
        raise BehindCameraError(f"point has non-positive camera depth {z}")
    pixel = np.array([camera.fx * p_cam[0] / z + camera.cx, camera.fy * p_cam[1] / z + camera.cy])
    return pixel, z


def project_points(points: np.ndarray, camera: CameraModel):
    """Vectorized projection of (N, 3) world points.

    Returns (pixels (N, 2), depths (N,), in_front (N,) bool). Points behind the
    camera get a False mask entry instead of an error.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    p_cam = pts @ camera.rotation.T + camera.translation
    z = p_cam[:, 2]
    in_front = z > 0
    safe_z = np.where(in_front, z, 1.0)
    px = np.stack(
        [camera.fx * p_cam[:, 0] / safe_z + camera.cx, camera.fy * p_cam[:, 1] / safe_z + camera.cy],
        axis=1,
    )
    return px, z, in_front


def back_project_grid(depth: np.ndarray, camera: CameraModel) -> np.ndarray:
    """Back-project a full (H, W) depth map to world points (H, W, 3)."""
    d = np.asarray(depth, dtype=np.float64)
    h, w = d.shape
    u = np.arange(w, dtype=np.float64)
    v = np.arange(h, dtype=np.float64)
    ray = np.empty((h, w, 3))
    ray[..., 0] = (u[None, :] - camera.cx) / camera.fx
    ray[..., 1] = (v[:, None] - camera.cy) / camera.fy
    ray[..., 2] = 1.0
    p_cam = ray * d[..., None]
    return (p_cam - camera.translation) @ camera.rotation


def lane_offset_schedule(cfg: LaneSwitchConfig) -> np.ndarray:
    """Lateral offsets in meters, one per frame index in [k_first, k_last]."""
    k = np.arange(cfg.k_first, cfg.k_last + 1, dtype=np.float64)
    return np.clip(cfg.gamma * np.sin(cfg.omega * k), -cfg.max_offset, cfg.max_offset)


def make_virtual_pose(camera: CameraModel, lateral_offset: float, max_offset: float | None = None) -> CameraModel:
    """Shift a camera laterally by ``lateral_offset`` meters along its own x axis.

    Rotation and intrinsics are untouched; only the translation changes, so
    orthonormality is preserved exactly. Offsets beyond ``max_offset`` raise
    CorridorViolationError.
    """
    off = float(lateral_offset)
    if max_offset is not None and abs(off) > max_offset + 1e-12:
        raise CorridorViolationError(
            f"offset {off:+.3f} m exceeds the +-{max_offset:.3f} m corridor"
        )
    t = camera.translation + np.array([off, 0.0, 0.0])
    return CameraModel(
        camera.fx, camera.fy, camera.cx, camera.cy,
        camera.width, camera.height, camera.rotation, t,
    )


def virtual_lane_converter(images, cfg: LaneSwitchConfig, renderer) -> list[tuple[ImageBuffer, CameraModel]]:
    """Render the current scene from the laterally shifted pose of every frame.

    ``images`` is a sequence of (ImageBuffer, CameraModel) pairs, one per frame
    index in [k_first, k_last]; ``renderer`` maps a CameraModel to an
    ImageBuffer of the current scene. Returns the virtual-lane image set in
    frame order.
    """
    images = list(images)
    offsets = lane_offset_schedule(cfg)
    if len(images) != len(offsets):
        raise ValueError(
            f"expected one image per frame index in [{cfg.k_first}, {cfg.k_last}], got {len(images)}"
        )
    out = []
    for (_, camera), off in zip(images, offsets):
        pose = make_virtual_pose(camera, off, cfg.max_offset)
        out.append((renderer(pose), pose))
    return out
