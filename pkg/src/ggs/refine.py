"""Multi-view depth refinement: neighborhood gathering, learnable fusion and
confidence-gated blending with MVS depth.

The fusion operator is a 3-layer 3x3 convolutional residual network
(input -> 16 -> 16 -> 1, tanh between layers, edge padding) over the mean of
the neighborhood feature maps concatenated with the log of the current depth.
With all weights zero it is the exact identity on depth. The blend rule keeps
the predicted depth wherever opacity clears the threshold and otherwise mixes
it with the projected MVS depth where one exists.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import project_points
from .scene import CameraModel, DepthMap, FeatureMap, PointCloud, SceneBundle

__all__ = [
    "RefineConfig",
    "FusionWeights",
    "gather_neighborhood",
    "fuse_depth",
    "fuse_depth_ctx",
    "fuse_depth_backward",
    "confidence_blend",
    "confidence_blend_backward",
    "project_pointcloud_to_depth",
]

DEFAULT_HIDDEN = 16
_MIN_DEPTH = 1e-4


@dataclass(frozen=True)
class RefineConfig:
    """alpha_threshold gates the blend on opacity, beta_blend weights the
    predicted depth against MVS depth, neighborhood_k is the one-sided
    neighborhood extent."""

    alpha_threshold: float = 0.5
    beta_blend: float = 0.7
    neighborhood_k: int = 2

    def __post_init__(self):
        if not (0.0 <= self.alpha_threshold <= 1.0):
            raise ValueError("alpha_threshold must lie in [0, 1]")
        if not (0.0 <= self.beta_blend <= 1.0):
            raise ValueError("beta_blend must lie in [0, 1]")
        if self.neighborhood_k < 0:
            raise ValueError("neighborhood_k must be non-negative")


def gather_neighborhood(frame_index: int, bundle: SceneBundle, k: int) -> list[FeatureMap]:
    """Feature maps of frames m in [i-k, i+k], intersected with the bundle's
    frame range (no padding at the boundaries), ascending m."""
    if not (bundle.k_first <= frame_index <= bundle.k_last):
        raise ValueError(f"frame index {frame_index} outside [{bundle.k_first}, {bundle.k_last}]")
    lo = max(bundle.k_first, frame_index - k)
    hi = min(bundle.k_last, frame_index + k)
    return [bundle.frames[m - bundle.k_first].features for m in range(lo, hi + 1)]


# -- convolutional fusion ------------------------------------------------
# Channels-last (H, W, C) with an im2col GEMM per layer; weights keep the
# conventional (out, in, 3, 3) shape.

def _im2col(x: np.ndarray) -> np.ndarray:
    h, w, c = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(0, 1))
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(h * w, 9 * c)


def _conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray,
             col: np.ndarray | None = None) -> np.ndarray:
    """3x3 convolution with edge padding; x is (H, W, C), w is (O, C, 3, 3)."""
    h, wd, c = x.shape
    o = w.shape[0]
    wf = np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(9 * c, o)
    if col is None:
        col = _im2col(x)
    return (col @ wf + b).reshape(h, wd, o)


def _conv3x3_backward(x: np.ndarray, w: np.ndarray, g_out: np.ndarray,
                      col: np.ndarray | None = None):
    """Gradients of `_conv3x3` w.r.t. input, weights and bias."""
    h, wd, c = x.shape
    o = w.shape[0]
    g_flat = g_out.reshape(h * wd, o)
    if col is None:
        col = _im2col(x)
    g_wf = col.T @ g_flat                       # (9C, O)
    g_w = g_wf.reshape(3, 3, c, o).transpose(3, 2, 0, 1).copy()
    g_col = (g_flat @ np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(9 * c, o).T)
    g_col = g_col.reshape(h, wd, 3, 3, c)
    g_xp = np.zeros((h + 2, wd + 2, c))
    for dy in range(3):
        for dx in range(3):
            g_xp[dy:dy + h, dx:dx + wd] += g_col[:, :, dy, dx]
    # adjoint of the edge padding: fold border rows/columns back in
    g_x = g_xp[1:-1, 1:-1].copy()
    g_x[0, :] += g_xp[0, 1:-1]
    g_x[-1, :] += g_xp[-1, 1:-1]
    g_x[:, 0] += g_xp[1:-1, 0]
    g_x[:, -1] += g_xp[1:-1, -1]
    g_x[0, 0] += g_xp[0, 0]
    g_x[0, -1] += g_xp[0, -1]
    g_x[-1, 0] += g_xp[-1, 0]
    g_x[-1, -1] += g_xp[-1, -1]
    return g_x, g_w, g_flat.sum(axis=0)


@dataclass
class FusionWeights:
    """Parameters of the 3-layer residual operator. The final layer starts at
    zero so the initial refinement is the exact identity on depth."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    @staticmethod
    def init(feature_dim: int, rng: np.random.Generator | None = None,
             hidden: int = DEFAULT_HIDDEN) -> "FusionWeights":
        rng = rng or np.random.default_rng(0)
        cin = feature_dim + 1
        return FusionWeights(
            w1=rng.normal(0.0, 0.3 / np.sqrt(cin * 9), (hidden, cin, 3, 3)),
            b1=np.zeros(hidden),
            w2=rng.normal(0.0, 0.3 / np.sqrt(hidden * 9), (hidden, hidden, 3, 3)),
            b2=np.zeros(hidden),
            w3=np.zeros((1, hidden, 3, 3)),
            b3=np.zeros(1),
        )

    @staticmethod
    def zeros(feature_dim: int, hidden: int = DEFAULT_HIDDEN) -> "FusionWeights":
        cin = feature_dim + 1
        return FusionWeights(
            np.zeros((hidden, cin, 3, 3)), np.zeros(hidden),
            np.zeros((hidden, hidden, 3, 3)), np.zeros(hidden),
            np.zeros((1, hidden, 3, 3)), np.zeros(1),
        )

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "w3": self.w3, "b3": self.b3}

    @property
    def feature_dim(self) -> int:
        return self.w1.shape[1] - 1


@dataclass
class FuseContext:
    x_in: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    cols: tuple[np.ndarray, np.ndarray, np.ndarray]
    depth_in: np.ndarray
    valid: np.ndarray
    clamped: np.ndarray
    n_neighbors: int


def fuse_depth_ctx(neighborhood: list[FeatureMap], depth: DepthMap,
                   weights: FusionWeights) -> tuple[DepthMap, FuseContext]:
    if not neighborhood:
        raise ValueError("neighborhood must contain at least one feature map")
    h, w = depth.depth.shape
    for fm in neighborhood:
        if fm.data.shape[:2] != (h, w):
            raise ValueError("neighborhood feature maps must match the depth resolution")
    if neighborhood[0].dim != weights.feature_dim:
        raise ValueError(
            f"fusion weights expect feature dim {weights.feature_dim}, got {neighborhood[0].dim}"
        )

    mean_feat = np.mean([fm.data for fm in neighborhood], axis=0)  # (H, W, F)
    valid = depth.valid
    log_d = np.where(valid, np.log(np.maximum(depth.depth, _MIN_DEPTH)), 0.0)
    x_in = np.concatenate([mean_feat, log_d[..., None]], axis=2)

    col0 = _im2col(x_in)
    a1 = np.tanh(_conv3x3(x_in, weights.w1, weights.b1, col=col0))
    col1 = _im2col(a1)
    a2 = np.tanh(_conv3x3(a1, weights.w2, weights.b2, col=col1))
    col2 = _im2col(a2)
    residual = _conv3x3(a2, weights.w3, weights.b3, col=col2)[..., 0]

    fused = depth.depth + residual
    clamped = fused < _MIN_DEPTH
    out = np.where(valid, np.maximum(fused, _MIN_DEPTH), depth.depth)
    ctx = FuseContext(x_in, a1, a2, (col0, col1, col2), depth.depth, valid, clamped,
                      len(neighborhood))
    return DepthMap.unchecked(out, valid), ctx


def fuse_depth(neighborhood: list[FeatureMap], depth: DepthMap,
               weights: FusionWeights) -> DepthMap:
    """Refined depth = depth + conv residual; validity mask preserved, output
    clamped positive."""
    return fuse_depth_ctx(neighborhood, depth, weights)[0]


def fuse_depth_backward(ctx: FuseContext, weights: FusionWeights, g_out: np.ndarray):
    """Returns (grad wrt input depth (H, W), grad wrt the mean feature map
    (H, W, F), grads for the fusion weights)."""
    g = np.where(ctx.valid & ~ctx.clamped, g_out, 0.0)
    g_res = g[..., None]  # (H, W, 1)

    g_a2, g_w3, g_b3 = _conv3x3_backward(ctx.a2, weights.w3, g_res, col=ctx.cols[2])
    g_h2 = g_a2 * (1.0 - ctx.a2**2)
    g_a1, g_w2, g_b2 = _conv3x3_backward(ctx.a1, weights.w2, g_h2, col=ctx.cols[1])
    g_h1 = g_a1 * (1.0 - ctx.a1**2)
    g_x, g_w1, g_b1 = _conv3x3_backward(ctx.x_in, weights.w1, g_h1, col=ctx.cols[0])

    g_mean_feat = g_x[:, :, :-1]
    g_logd = g_x[:, :, -1]
    # residual path (identity) plus the log-depth conditioning channel
    g_depth = g + np.where(
        ctx.valid & (ctx.depth_in > _MIN_DEPTH), g_logd / np.maximum(ctx.depth_in, _MIN_DEPTH), 0.0
    )
    g_weights = {"w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2, "w3": g_w3, "b3": g_b3}
    return g_depth, g_mean_feat, g_weights


# -- confidence-gated blending -------------------------------------------

def confidence_blend(pred: DepthMap, mvs: DepthMap, opacity: np.ndarray,
                     cfg: RefineConfig) -> DepthMap:
    """Keep predicted depth where opacity >= alpha_threshold; elsewhere blend
    beta * pred + (1 - beta) * mvs when the MVS pixel is valid, and fall back
    to the prediction when it is not."""
    if pred.depth.shape != mvs.depth.shape:
        raise ValueError("predicted and MVS depth maps must share resolution")
    opacity = np.asarray(opacity, dtype=np.float64)
    if opacity.shape != pred.depth.shape:
        raise ValueError("opacity map must share the depth resolution")
    blend = (opacity < cfg.alpha_threshold) & mvs.valid
    out = np.where(blend, cfg.beta_blend * pred.depth + (1.0 - cfg.beta_blend) * mvs.depth,
                   pred.depth)
    return DepthMap.unchecked(out, pred.valid)


def confidence_blend_backward(pred: DepthMap, mvs: DepthMap, opacity: np.ndarray,
                              cfg: RefineConfig, g_out: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the predicted depth (MVS depth and opacity are data)."""
    blend = (np.asarray(opacity) < cfg.alpha_threshold) & mvs.valid
    return np.where(blend, cfg.beta_blend * g_out, g_out)


def project_pointcloud_to_depth(cloud: PointCloud, camera: CameraModel) -> DepthMap:
    """Z-buffered nearest depth of the cloud under the camera; pixels hit by
    no point are invalid."""
    if len(cloud) == 0:
        raise ValueError("point cloud is empty")
    px, z, in_front = project_points(cloud.positions, camera)
    u = np.round(px[:, 0]).astype(np.int64)
    v = np.round(px[:, 1]).astype(np.int64)
    ok = in_front & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    depth = np.full((camera.height, camera.width), np.inf)
    np.minimum.at(depth, (v[ok], u[ok]), z[ok])
    valid = np.isfinite(depth)
    return DepthMap(np.where(valid, depth, 1.0), valid)
