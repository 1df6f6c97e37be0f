"""Procedural three-lane street scene with exact geometry.

Generates a textured ground plane with lane markings, a far wall, and boxes
standing between and beside the lanes (the between-lane occluder exercises the
blind-spot scenario). Middle-lane frames are the training inputs; left/right
lane frames are ground truth that training never sees; interpolated middle
poses serve as held-out evaluation views. Depth maps are analytic, the point
cloud is subsampled from the true geometry, and per-pixel occlusion masks mark
left/right-lane content invisible from the middle lane.

Textures are smooth functions of the world point, so colors are multi-view
consistent by construction. All randomness flows from one seed; identical
seeds produce byte-identical on-disk scenes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .io import save_depth, load_depth, save_ply, load_ply, save_poses, load_poses
from .scene import CameraModel, DepthMap, FeatureMap, Frame, ImageBuffer, PointCloud, SceneBundle

__all__ = ["SyntheticSpec", "SyntheticScene", "generate_scene", "write_scene",
           "load_scene_bundle", "load_lane_truth", "load_holdout"]

GROUND_Y = 1.5  # camera height above the road, y points down
WALL_Z = 30.0


@dataclass(frozen=True)
class SyntheticSpec:
    frames: int = 8
    width: int = 128
    height: int = 64
    lane_width: float = 3.0
    spacing: float = 1.0
    cloud_stride: int = 4
    focal: float = 76.0


@dataclass
class _Box:
    x0: float
    x1: float
    y0: float
    y1: float
    z0: float
    z1: float
    color: np.ndarray


@dataclass
class SyntheticScene:
    spec: SyntheticSpec
    seed: int
    boxes: list[_Box]
    middle: list[tuple[CameraModel, ImageBuffer, DepthMap]]
    left: list[tuple[CameraModel, ImageBuffer, np.ndarray]]   # mask: middle-lane blind spot
    right: list[tuple[CameraModel, ImageBuffer, np.ndarray]]
    holdout: list[tuple[CameraModel, ImageBuffer]]
    cloud: PointCloud


def _camera(spec: SyntheticSpec, x: float, z: float) -> CameraModel:
    center = np.array([x, 0.0, z])
    return CameraModel(
        spec.focal, spec.focal, (spec.width - 1) / 2.0, (spec.height - 1) / 2.0,
        spec.width, spec.height, np.eye(3), -center,
    )


def _make_boxes(spec: SyntheticSpec, rng: np.random.Generator) -> list[_Box]:
    half = spec.lane_width / 2.0
    boxes = []

    def add(x0, x1, z0, z1, h, color):
        boxes.append(_Box(x0, x1, GROUND_Y - h, GROUND_Y, z0, z1, np.asarray(color)))

    # blind-spot occluder between the middle and left lanes
    add(-half - 1.1, -half + 0.1, 8.0, 10.0, 1.5, (0.75, 0.35, 0.25))
    # a matching occluder on the right side, further out
    add(half - 0.1, half + 1.1, 12.0, 14.0, 1.3, (0.30, 0.45, 0.75))
    # roadside clutter for parallax
    for side in (-1.0, 1.0):
        for i in range(3):
            z0 = 6.0 + 7.0 * i + rng.uniform(-1.0, 1.0)
            x0 = side * (spec.lane_width + 2.0 + rng.uniform(0.0, 1.5))
            w = rng.uniform(0.8, 1.6)
            add(min(x0, x0 + side * w), max(x0, x0 + side * w), z0, z0 + rng.uniform(1.0, 2.0),
                rng.uniform(1.0, 2.2), rng.uniform(0.25, 0.8, 3))
    return boxes


def _textures(points: np.ndarray, obj: np.ndarray, boxes: list[_Box],
              lane_width: float) -> np.ndarray:
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    colors = np.zeros(points.shape)

    ground = obj == 0
    base = np.array([0.36, 0.34, 0.31])
    mottle = 0.07 * np.sin(1.7 * x) * np.sin(0.9 * z) + 0.05 * np.sin(0.45 * z + 1.3)
    gcol = base[None] + mottle[..., None] * np.array([1.0, 0.95, 0.8])
    half = lane_width / 2.0
    dash = (np.minimum(np.abs(x - half), np.abs(x + half)) < 0.09) & (np.mod(z, 2.0) < 1.25)
    edge = np.abs(np.abs(x) - (half + lane_width)) < 0.09
    gcol = np.where((dash | edge)[..., None], np.array([0.85, 0.85, 0.8]), gcol)
    colors = np.where(ground[..., None], gcol, colors)

    wall = obj == 1
    wcol = (np.array([0.42, 0.47, 0.54])[None]
            + (0.10 * np.sin(0.55 * x) * np.cos(0.9 * y))[..., None] * np.array([1.0, 0.9, 0.7])
            + (0.05 * np.sin(2.3 * x + 0.7))[..., None])
    colors = np.where(wall[..., None], wcol, colors)

    for b_idx, box in enumerate(boxes):
        m = obj == 2 + b_idx
        if np.any(m):
            pat = 0.08 * np.sin(2.8 * (x + y)) + 0.06 * np.cos(2.2 * (z + y))
            bcol = box.color[None] + pat[..., None]
            colors = np.where(m[..., None], bcol, colors)
    return np.clip(colors, 0.03, 0.97)


def _raycast(camera: CameraModel, boxes: list[_Box], lane_width: float):
    """Analytic first-hit along every pixel ray. Returns (depth map (H, W),
    colors (H, W, 3), object ids (H, W))."""
    h, w = camera.height, camera.width
    u = (np.arange(w) - camera.cx) / camera.fx
    v = (np.arange(h) - camera.cy) / camera.fy
    dirs = np.empty((h, w, 3))
    dirs[..., 0] = u[None, :]
    dirs[..., 1] = v[:, None]
    dirs[..., 2] = 1.0
    dirs = dirs @ camera.rotation  # camera-to-world applied to rows
    origin = camera.center

    t_best = np.full((h, w), np.inf)
    obj = np.full((h, w), -1, dtype=np.int64)

    # ground plane y = GROUND_Y
    dy = dirs[..., 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (GROUND_Y - origin[1]) / dy
    hit = (dy > 1e-9) & (t > 1e-6) & (t < t_best)
    z_at = origin[2] + t * dirs[..., 2]
    hit &= z_at <= WALL_Z
    t_best = np.where(hit, t, t_best)
    obj = np.where(hit, 0, obj)

    # back wall z = WALL_Z
    dz = dirs[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (WALL_Z - origin[2]) / dz
    hit = (dz > 1e-9) & (t > 1e-6) & (t < t_best)
    y_at = origin[1] + t * dirs[..., 1]
    hit &= y_at <= GROUND_Y + 1e-9
    t_best = np.where(hit, t, t_best)
    obj = np.where(hit, 1, obj)

    # boxes (axis-aligned slab test)
    lo_all = dirs.reshape(-1, 3)
    for b_idx, box in enumerate(boxes):
        lo = np.array([box.x0, box.y0, box.z0])
        hi = np.array([box.x1, box.y1, box.z1])
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / lo_all
            t0 = (lo[None] - origin[None]) * inv
            t1 = (hi[None] - origin[None]) * inv
        tmin = np.minimum(t0, t1).max(axis=1).reshape(obj.shape)
        tmax = np.maximum(t0, t1).min(axis=1).reshape(obj.shape)
        hit = (tmax >= tmin) & (tmax > 1e-6) & (np.maximum(tmin, 1e-6) < t_best)
        t_hit = np.maximum(tmin, 1e-6)
        t_best = np.where(hit, t_hit, t_best)
        obj = np.where(hit, 2 + b_idx, obj)

    valid = np.isfinite(t_best)
    points = origin[None, None] + t_best[..., None] * dirs
    colors = _textures(points, obj, boxes, lane_width)
    colors = np.where(valid[..., None], colors, 0.5)
    # dirs have unit camera z, so the ray parameter is the camera depth
    depth = np.where(valid, t_best, 1.0)
    return DepthMap(depth, valid), ImageBuffer(_quantize(colors)), obj


def _quantize(colors: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so in-memory scenes equal their PNG round trip."""
    return np.round(np.clip(colors, 0.0, 1.0) * 255.0) / 255.0


def _blind_mask(camera: CameraModel, depth: DepthMap, mid_cam: CameraModel,
                mid_depth: DepthMap) -> np.ndarray:
    """Pixels of a side-lane view whose content the paired middle-lane frame
    cannot see (out of frustum or occluded there)."""
    h, w = depth.depth.shape
    u = (np.arange(w) - camera.cx) / camera.fx
    v = (np.arange(h) - camera.cy) / camera.fy
    dirs = np.empty((h, w, 3))
    dirs[..., 0] = u[None, :]
    dirs[..., 1] = v[:, None]
    dirs[..., 2] = 1.0
    points = camera.center[None, None] + depth.depth[..., None] * (dirs @ camera.rotation)
    p_mid = points @ mid_cam.rotation.T + mid_cam.translation
    z = p_mid[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = mid_cam.fx * p_mid[..., 0] / z + mid_cam.cx
        py = mid_cam.fy * p_mid[..., 1] / z + mid_cam.cy
    inside = (z > 0) & (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)
    ui = np.clip(np.round(px), 0, w - 1).astype(np.int64)
    vi = np.clip(np.round(py), 0, h - 1).astype(np.int64)
    seen_depth = mid_depth.depth[vi, ui]
    occluded = inside & (z > seen_depth + 0.08)
    return (~inside) | occluded


def generate_scene(spec: SyntheticSpec, seed: int = 0) -> SyntheticScene:
    rng = np.random.default_rng(seed)
    boxes = _make_boxes(spec, rng)

    middle, left, right, holdout = [], [], [], []
    for k in range(spec.frames):
        z = k * spec.spacing
        cam = _camera(spec, 0.0, z)
        depth, img, _ = _raycast(cam, boxes, spec.lane_width)
        middle.append((cam, img, depth))

    for k in range(spec.frames):
        z = k * spec.spacing
        for x, store in ((-spec.lane_width, left), (spec.lane_width, right)):
            cam = _camera(spec, x, z)
            depth, img, _ = _raycast(cam, boxes, spec.lane_width)
            mask = _blind_mask(cam, depth, middle[k][0], middle[k][2])
            store.append((cam, img, mask))

    for k in range(spec.frames - 1):
        cam = _camera(spec, 0.0, (k + 0.5) * spec.spacing)
        _, img, _ = _raycast(cam, boxes, spec.lane_width)
        holdout.append((cam, img))

    pts, cols = [], []
    for cam, img, depth in middle:
        ys, xs = np.nonzero(depth.valid)
        pick = (ys % spec.cloud_stride == 0) & (xs % spec.cloud_stride == 0)
        ys, xs = ys[pick], xs[pick]
        d = depth.depth[ys, xs]
        ray = np.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy, np.ones_like(d)], axis=1)
        pts.append((ray * d[:, None] - cam.translation) @ cam.rotation)
        cols.append(img.pixels[ys, xs])
    cloud = PointCloud(np.concatenate(pts), np.concatenate(cols))
    return SyntheticScene(spec, seed, boxes, middle, left, right, holdout, cloud)


# -- disk layout ---------------------------------------------------------------

def _save_image(img: ImageBuffer, path):
    arr = np.round(img.pixels * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def _load_image(path) -> ImageBuffer:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return ImageBuffer(arr)


def write_scene(scene: SyntheticScene, out_dir):
    """Directory layout:

    poses.txt, images/, depth/, cloud.ply          middle-lane training data
    holdout/poses.txt, holdout/images/             held-out interpolated poses
    lanes/{left,right}/poses.txt, images/, masks/  side-lane ground truth
    """
    out = Path(out_dir)
    for sub in ("images", "depth", "holdout/images", "lanes/left/images",
                "lanes/left/masks", "lanes/right/images", "lanes/right/masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    save_poses({k: cam for k, (cam, _, _) in enumerate(scene.middle)}, out / "poses.txt")
    for k, (_, img, depth) in enumerate(scene.middle):
        _save_image(img, out / "images" / f"frame_{k:04d}.png")
        save_depth(depth, out / "depth" / f"frame_{k:04d}.pfm")
    save_ply(scene.cloud, out / "cloud.ply")

    save_poses({k: cam for k, (cam, _) in enumerate(scene.holdout)}, out / "holdout" / "poses.txt")
    for k, (_, img) in enumerate(scene.holdout):
        _save_image(img, out / "holdout" / "images" / f"frame_{k:04d}.png")

    for tag, rows in (("left", scene.left), ("right", scene.right)):
        base = out / "lanes" / tag
        save_poses({k: cam for k, (cam, _, _) in enumerate(rows)}, base / "poses.txt")
        for k, (_, img, mask) in enumerate(rows):
            _save_image(img, base / "images" / f"frame_{k:04d}.png")
            Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(
                base / "masks" / f"frame_{k:04d}.png"
            )


def load_scene_bundle(scene_dir, feature_dim: int = 16) -> SceneBundle:
    """Load the middle-lane training bundle. Bundle features carry the image
    RGB in their first three channels (trainable state re-seeds them anyway)."""
    base = Path(scene_dir)
    poses = load_poses(base / "poses.txt")
    frames = []
    for fid in sorted(poses):
        cam = poses[fid]
        img = _load_image(base / "images" / f"frame_{fid:04d}.png")
        depth = load_depth(base / "depth" / f"frame_{fid:04d}.pfm")
        feats = np.zeros((img.height, img.width, feature_dim))
        feats[:, :, :3] = img.pixels
        frames.append(Frame(img, cam, depth, FeatureMap(feats)))
    cloud = load_ply(base / "cloud.ply")
    ids = sorted(poses)
    return SceneBundle(tuple(frames), cloud, (ids[0], ids[-1]))


def load_lane_truth(scene_dir, tag: str):
    """Ground-truth (camera, image, mask) rows for one side lane, or [] if the
    scene has no such lane."""
    base = Path(scene_dir) / "lanes" / tag
    if not (base / "poses.txt").exists():
        return []
    poses = load_poses(base / "poses.txt")
    rows = []
    for fid in sorted(poses):
        img = _load_image(base / "images" / f"frame_{fid:04d}.png")
        mask_path = base / "masks" / f"frame_{fid:04d}.png"
        mask = None
        if mask_path.exists():
            mask = np.asarray(Image.open(mask_path)) > 127
        rows.append((poses[fid], img, mask))
    return rows


def load_holdout(scene_dir):
    base = Path(scene_dir) / "holdout"
    if not (base / "poses.txt").exists():
        return []
    poses = load_poses(base / "poses.txt")
    return [(poses[fid], _load_image(base / "images" / f"frame_{fid:04d}.png"))
            for fid in sorted(poses)]
