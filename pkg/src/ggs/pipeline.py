"""The differentiable frame pipeline: depth refinement, confidence blending
and Gaussian decoding, with the matching backward chain.

`forward_frame` is deliberately agnostic about where its inputs come from.
Stage one feeds captured depth plus learnable residuals and squashed per-pixel
confidence; the lane-cycle rebuild feeds rendered colors, rendered expected
depth and accumulated alpha. Both reuse the same backward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decode import (
    BuildContext,
    DecodeHeads,
    build_gaussians_backward,
    build_gaussians_ctx,
)
from .refine import (
    FuseContext,
    FusionWeights,
    RefineConfig,
    confidence_blend,
    confidence_blend_backward,
    fuse_depth_backward,
    fuse_depth_ctx,
)
from .scene import CameraModel, DepthMap, FeatureMap, GaussianSet

__all__ = ["FrameCtx", "FrameGrads", "forward_frame", "backward_frame", "concat_sets"]


@dataclass
class FrameCtx:
    camera: CameraModel
    fuse_ctx: FuseContext
    refined: DepthMap
    mvs: DepthMap | None
    conf: np.ndarray
    decode_ctx: BuildContext
    refine_cfg: RefineConfig
    count: int


@dataclass
class FrameGrads:
    depth: np.ndarray            # w.r.t. the frame's input depth values
    features: np.ndarray         # w.r.t. the frame's own feature map
    neighborhood_mean: np.ndarray  # w.r.t. the mean neighborhood feature map
    conf: np.ndarray             # w.r.t. the confidence map fed in
    heads: dict[str, np.ndarray]
    fusion: dict[str, np.ndarray]


def forward_frame(
    camera: CameraModel,
    depth_values: np.ndarray,
    depth_valid: np.ndarray,
    features: np.ndarray,
    conf: np.ndarray,
    neighborhood: list[np.ndarray],
    mvs: DepthMap | None,
    heads: DecodeHeads,
    fusion: FusionWeights,
    refine_cfg: RefineConfig,
) -> tuple[GaussianSet, FrameCtx]:
    """Refine depth, blend against MVS where confidence is low, and decode
    one Gaussian per valid pixel. ``conf`` must already lie in [0, 1]."""
    depth_in = DepthMap.unchecked(np.asarray(depth_values, dtype=np.float64),
                                  np.asarray(depth_valid, dtype=bool))
    neigh_maps = [FeatureMap(n) for n in neighborhood]
    refined, fuse_ctx = fuse_depth_ctx(neigh_maps, depth_in, fusion)
    if mvs is not None:
        blended = confidence_blend(refined, mvs, conf, refine_cfg)
    else:
        blended = refined
    gaussians, dec_ctx = build_gaussians_ctx(
        blended, FeatureMap(features), conf, camera, heads
    )
    ctx = FrameCtx(camera, fuse_ctx, refined, mvs, conf, dec_ctx, refine_cfg, len(gaussians))
    return gaussians, ctx


def backward_frame(ctx: FrameCtx, heads: DecodeHeads, fusion: FusionWeights, grads) -> FrameGrads:
    """Chain per-Gaussian gradients back to the frame inputs and the shared
    head / fusion parameters."""
    dec = build_gaussians_backward(ctx.decode_ctx, grads, heads)
    g_blended = dec["depth"]
    if ctx.mvs is not None:
        g_refined = confidence_blend_backward(ctx.refined, ctx.mvs, ctx.conf,
                                              ctx.refine_cfg, g_blended)
    else:
        g_refined = g_blended
    g_depth, g_mean_feat, g_fusion = fuse_depth_backward(ctx.fuse_ctx, fusion, g_refined)
    return FrameGrads(
        depth=g_depth,
        features=dec["features"],
        neighborhood_mean=g_mean_feat,
        conf=dec["confidence"],
        heads=dec["heads"],
        fusion=g_fusion,
    )


def concat_sets(sets: list[GaussianSet]) -> GaussianSet:
    if not sets:
        return GaussianSet.empty()
    return GaussianSet(
        np.concatenate([s.centers for s in sets]),
        np.concatenate([s.scales for s in sets]),
        np.concatenate([s.rotations for s in sets]),
        np.concatenate([s.opacities for s in sets]),
        np.concatenate([s.colors for s in sets]),
        validate=False,
    )
