"""Trained scene state: everything needed to rebuild splats and render.

The state holds the per-frame training inputs (cameras, seed depth, validity),
the learnable parameter groups (features, raw confidence, depth residuals,
decode heads, fusion weights), the MVS point cloud and the run configuration.
Checkpoints round-trip all of it bit-exactly through the GGSC container.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import io as ggsio
from .config import (
    canonical_config_bytes,
    config_from_bytes,
    default_config,
    lane_config_from,
    raster_settings_from,
    refine_config_from,
)
from .decode import DEFAULT_FEATURE_DIM, DecodeHeads, sigmoid
from .geometry import LaneSwitchConfig
from .pipeline import concat_sets, forward_frame
from .raster import RasterSettings, RenderOutput, rasterize
from .refine import FusionWeights, RefineConfig, project_pointcloud_to_depth
from .scene import CameraModel, DepthMap, GaussianSet, PointCloud, SceneBundle

__all__ = ["SceneState", "init_state", "save_checkpoint", "load_checkpoint"]


@dataclass
class SceneState:
    cameras: list[CameraModel]
    depth_base: np.ndarray       # (N, H, W)
    depth_valid: np.ndarray      # (N, H, W) bool
    features: np.ndarray         # (N, H, W, F) learnable
    conf_raw: np.ndarray         # (N, H, W) learnable; sigmoid -> confidence
    depth_residual: np.ndarray   # (N, H, W) learnable
    heads: DecodeHeads
    fusion: FusionWeights
    cloud: PointCloud
    config: dict
    k_first: int = 0

    def __post_init__(self):
        self._mvs_cache: dict[int, DepthMap] = {}

    @property
    def frame_count(self) -> int:
        return len(self.cameras)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.depth_base.shape[1], self.depth_base.shape[2]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[3]

    @property
    def lane_cfg(self) -> LaneSwitchConfig:
        return lane_config_from(self.config, self.k_first, self.k_first + self.frame_count - 1)

    @property
    def refine_cfg(self) -> RefineConfig:
        return refine_config_from(self.config)

    @property
    def raster_settings(self) -> RasterSettings:
        return raster_settings_from(self.config)

    def confidence(self, i: int) -> np.ndarray:
        return sigmoid(self.conf_raw[i])

    def mvs_depth(self, i: int) -> DepthMap:
        if i not in self._mvs_cache:
            self._mvs_cache[i] = project_pointcloud_to_depth(self.cloud, self.cameras[i])
        return self._mvs_cache[i]

    def neighborhood_indices(self, i: int) -> list[int]:
        k = self.refine_cfg.neighborhood_k
        return list(range(max(0, i - k), min(self.frame_count - 1, i + k) + 1))

    def build_frame(self, i: int):
        """Forward pipeline for frame i; returns (GaussianSet, FrameCtx)."""
        neigh = [self.features[j] for j in self.neighborhood_indices(i)]
        return forward_frame(
            self.cameras[i],
            self.depth_base[i] + self.depth_residual[i],
            self.depth_valid[i],
            self.features[i],
            self.confidence(i),
            neigh,
            self.mvs_depth(i),
            self.heads,
            self.fusion,
            self.refine_cfg,
        )

    def build_scene(self, indices: list[int] | None = None):
        """Splats of the named frames (all frames by default), concatenated in
        frame order; returns (GaussianSet, list[FrameCtx])."""
        if indices is None:
            indices = list(range(self.frame_count))
        sets, ctxs = [], []
        for i in indices:
            g, ctx = self.build_frame(i)
            sets.append(g)
            ctxs.append(ctx)
        return concat_sets(sets), ctxs

    def frames_near(self, camera: CameraModel, count: int | None = None) -> list[int]:
        """Indices of the frames whose camera centers are nearest the pose,
        ascending; used to build the scene for novel-view renders."""
        if count is None:
            count = int(self.config.get("render.window", 4))
        if count <= 0 or count >= self.frame_count:
            return list(range(self.frame_count))
        target = camera.center
        d = [(float(np.linalg.norm(c.center - target)), i) for i, c in enumerate(self.cameras)]
        picked = sorted(i for _, i in sorted(d)[:count])
        return picked

    def window(self, i: int, context: int | None = None) -> list[int]:
        """Frame indices used to render around target frame i."""
        if context is None:
            context = int(self.config["train.context"])
        if context < 0:
            return list(range(self.frame_count))
        return list(range(max(0, i - context), min(self.frame_count - 1, i + context) + 1))

    def render(self, camera: CameraModel, indices: list[int] | None = None,
               gaussians: GaussianSet | None = None) -> RenderOutput:
        """Render a pose. Without explicit ``indices`` or ``gaussians`` the
        scene is built from the frames nearest the pose (`render.window`)."""
        if gaussians is None:
            if indices is None:
                indices = self.frames_near(camera)
            gaussians, _ = self.build_scene(indices)
        return rasterize(gaussians, camera, self.raster_settings)

    def params(self) -> dict[str, np.ndarray]:
        """Flat view of every learnable array, keyed by group (heads and
        fusion expand to their member arrays)."""
        out = {
            "features": self.features,
            "conf_raw": self.conf_raw,
            "depth_residual": self.depth_residual,
        }
        out.update({f"heads.{k}": v for k, v in self.heads.params().items()})
        out.update({f"fusion.{k}": v for k, v in self.fusion.params().items()})
        return out


def init_state(bundle: SceneBundle, config: dict | None = None,
               seed: int | None = None) -> SceneState:
    """Seed a trainable state from a capture bundle.

    Features start as pixel RGB in the first three channels plus small noise
    elsewhere, confidence starts at 0.5 (zero raw logit), depth residuals at
    zero, fusion weights with a zero final layer (identity refinement).
    """
    config = dict(config or default_config())
    if seed is None:
        seed = int(config["train.seed"])
    rng = np.random.default_rng(seed)
    n = len(bundle)
    h, w = bundle.resolution()
    fdim = int(config["features.dim"])

    features = rng.normal(0.0, 0.01, (n, h, w, fdim))
    for i, fr in enumerate(bundle.frames):
        features[i, :, :, :3] = fr.image.pixels
    depth_base = np.stack([fr.depth.depth for fr in bundle.frames])
    depth_valid = np.stack([fr.depth.valid for fr in bundle.frames])

    return SceneState(
        cameras=[fr.camera for fr in bundle.frames],
        depth_base=depth_base,
        depth_valid=depth_valid,
        features=features,
        conf_raw=np.zeros((n, h, w)),
        depth_residual=np.zeros((n, h, w)),
        heads=DecodeHeads.init(fdim, rng, scale_bias=config["decode.scale_bias"],
                               color_gain=config["decode.color_gain"]),
        fusion=FusionWeights.init(fdim, rng, hidden=int(config["refine.hidden"])),
        cloud=bundle.point_cloud,
        config=config,
        k_first=bundle.k_first,
    )


_HEAD_KEYS = ("scale_w", "scale_b", "rot_w", "rot_b", "color_w", "color_b")
_FUSION_KEYS = ("w1", "b1", "w2", "b2", "w3", "b3")


def save_checkpoint(state: SceneState, path):
    """Serialize a scene state; the write order is fixed so identical states
    produce byte-identical files."""
    cams = np.stack([
        np.concatenate([[c.fx, c.fy, c.cx, c.cy], c.rotation.reshape(-1), c.translation])
        for c in state.cameras
    ])
    meta = {
        "frames": state.frame_count,
        "height": state.resolution[0],
        "width": state.resolution[1],
        "feature_dim": state.feature_dim,
        "k_first": state.k_first,
        "cam_width": state.cameras[0].width,
        "cam_height": state.cameras[0].height,
    }
    sections: list[tuple[str, bytes | np.ndarray]] = [
        ("meta", canonical_config_bytes({str(k): v for k, v in sorted(meta.items())})),
        ("config", canonical_config_bytes(state.config)),
        ("cameras", cams),
        ("depth_base", state.depth_base),
        ("depth_valid", state.depth_valid.astype(np.uint8)),
        ("features", state.features),
        ("conf_raw", state.conf_raw),
        ("depth_residual", state.depth_residual),
        ("cloud.positions", state.cloud.positions),
        ("cloud.colors", state.cloud.colors),
    ]
    heads = state.heads.params()
    sections += [(f"heads.{k}", heads[k]) for k in _HEAD_KEYS]
    fusion = state.fusion.params()
    sections += [(f"fusion.{k}", fusion[k]) for k in _FUSION_KEYS]
    ggsio.write_sections(path, sections)


def load_checkpoint(path) -> SceneState:
    sections = ggsio.read_sections(path)
    meta = ggsio.decode_json_section(sections, "meta")
    config = config_from_bytes(sections["config"]) if "config" in sections else default_config()
    cams_arr = ggsio.decode_array_section(sections, "cameras")
    cw, ch = int(meta["cam_width"]), int(meta["cam_height"])
    cameras = [
        CameraModel(row[0], row[1], row[2], row[3], cw, ch,
                    row[4:13].reshape(3, 3), row[13:16])
        for row in cams_arr
    ]
    heads = DecodeHeads(**{k: ggsio.decode_array_section(sections, f"heads.{k}")
                           for k in _HEAD_KEYS})
    fusion = FusionWeights(**{k: ggsio.decode_array_section(sections, f"fusion.{k}")
                              for k in _FUSION_KEYS})
    return SceneState(
        cameras=cameras,
        depth_base=ggsio.decode_array_section(sections, "depth_base"),
        depth_valid=ggsio.decode_array_section(sections, "depth_valid").astype(bool),
        features=ggsio.decode_array_section(sections, "features"),
        conf_raw=ggsio.decode_array_section(sections, "conf_raw"),
        depth_residual=ggsio.decode_array_section(sections, "depth_residual"),
        heads=heads,
        fusion=fusion,
        cloud=PointCloud(ggsio.decode_array_section(sections, "cloud.positions"),
                         ggsio.decode_array_section(sections, "cloud.colors")),
        config=config,
        k_first=int(meta["k_first"]),
    )
