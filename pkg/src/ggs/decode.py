"""Per-pixel Gaussian decoding: depth + features -> splat parameters.

Each valid-depth pixel becomes one Gaussian. The center is the back-projected
pixel; scale, rotation and color come from three affine heads applied to the
pixel's feature vector, squashed by softplus / normalization / sigmoid
respectively; opacity passes the pixel's matching confidence through directly.

The heads are single affine maps and the features are free per-pixel
parameters (seeded from pixel colors), standing in for a learned encoder.
Everything here has an analytic backward used by the trainer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import back_project_grid
from .quaternions import normalize, normalize_backward
from .scene import CameraModel, DepthMap, FeatureMap, GaussianSet

__all__ = [
    "DecodeHeads",
    "DegenerateRotationError",
    "softplus",
    "sigmoid",
    "decode_scale",
    "decode_rotation",
    "decode_color",
    "opacity_from_confidence",
    "build_gaussians",
    "build_gaussians_ctx",
    "build_gaussians_backward",
]

DEFAULT_FEATURE_DIM = 16


class DegenerateRotationError(ValueError):
    pass


def softplus(z):
    z = np.asarray(z, dtype=np.float64)
    return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class DecodeHeads:
    """Affine heads mapping a feature vector to scale (3), rotation (4) and
    color (3) pre-activations. Weights are (out, feature_dim)."""

    scale_w: np.ndarray
    scale_b: np.ndarray
    rot_w: np.ndarray
    rot_b: np.ndarray
    color_w: np.ndarray
    color_b: np.ndarray

    def __post_init__(self):
        self.scale_w = np.asarray(self.scale_w, dtype=np.float64)
        self.scale_b = np.asarray(self.scale_b, dtype=np.float64).reshape(-1)
        self.rot_w = np.asarray(self.rot_w, dtype=np.float64)
        self.rot_b = np.asarray(self.rot_b, dtype=np.float64).reshape(-1)
        self.color_w = np.asarray(self.color_w, dtype=np.float64)
        self.color_b = np.asarray(self.color_b, dtype=np.float64).reshape(-1)
        if self.scale_w.shape[0] != 3 or self.scale_b.shape != (3,):
            raise ValueError("scale head must produce 3 outputs")
        if self.rot_w.shape[0] != 4 or self.rot_b.shape != (4,):
            raise ValueError("rotation head must produce 4 outputs")
        if self.color_w.shape[0] != 3 or self.color_b.shape != (3,):
            raise ValueError("color head must produce 3 outputs")
        dims = {self.scale_w.shape[1], self.rot_w.shape[1], self.color_w.shape[1]}
        if len(dims) != 1:
            raise ValueError("all heads must share one feature dimension")
        for arr in (self.scale_w, self.scale_b, self.rot_w, self.rot_b, self.color_w, self.color_b):
            if not np.all(np.isfinite(arr)):
                raise ValueError("head weights must be finite")

    @property
    def feature_dim(self) -> int:
        return self.scale_w.shape[1]

    @staticmethod
    def init(feature_dim: int = DEFAULT_FEATURE_DIM, rng: np.random.Generator | None = None,
             scale_bias: float = -1.5, color_gain: float = 6.0) -> "DecodeHeads":
        """Seeded initialization: near-identity rotations, a shared softplus
        scale bias, and a color head reading the RGB feature channels through
        a centered sigmoid gain."""
        rng = rng or np.random.default_rng(0)
        sw = rng.normal(0.0, 0.01, (3, feature_dim))
        rw = rng.normal(0.0, 0.01, (4, feature_dim))
        cw = rng.normal(0.0, 0.01, (3, feature_dim))
        cw[:, :3] += color_gain * np.eye(3)
        return DecodeHeads(
            scale_w=sw, scale_b=np.full(3, scale_bias),
            rot_w=rw, rot_b=np.array([1.0, 0.0, 0.0, 0.0]),
            color_w=cw, color_b=np.full(3, -color_gain / 2.0),
        )

    def params(self) -> dict[str, np.ndarray]:
        return {
            "scale_w": self.scale_w, "scale_b": self.scale_b,
            "rot_w": self.rot_w, "rot_b": self.rot_b,
            "color_w": self.color_w, "color_b": self.color_b,
        }


def _check_dim(features: np.ndarray, heads: DecodeHeads):
    if features.shape[-1] != heads.feature_dim:
        raise ValueError(
            f"feature dimension {features.shape[-1]} does not match heads ({heads.feature_dim})"
        )


def decode_scale(features, heads: DecodeHeads) -> np.ndarray:
    """softplus(scale head): strictly positive per-axis standard deviations."""
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    _check_dim(f, heads)
    out = softplus(f @ heads.scale_w.T + heads.scale_b)
    return out[0] if np.ndim(features) == 1 else out


def decode_rotation(features, heads: DecodeHeads) -> np.ndarray:
    """Normalized rotation head output; the zero quaternion is rejected."""
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    _check_dim(f, heads)
    raw = f @ heads.rot_w.T + heads.rot_b
    norms = np.linalg.norm(raw, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateRotationError("rotation head produced a zero quaternion")
    out = raw / norms[:, None]
    return out[0] if np.ndim(features) == 1 else out


def decode_color(features, heads: DecodeHeads) -> np.ndarray:
    """Componentwise sigmoid of the color head, inside (0, 1)."""
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    _check_dim(f, heads)
    out = sigmoid(f @ heads.color_w.T + heads.color_b)
    return out[0] if np.ndim(features) == 1 else out


def opacity_from_confidence(confidence):
    """Matching confidence used as opacity directly; values outside [0, 1]
    are clamped, non-finite input is rejected."""
    c = np.asarray(confidence, dtype=np.float64)
    if not np.all(np.isfinite(c)):
        raise ValueError("confidence must be finite")
    out = np.clip(c, 0.0, 1.0)
    return float(out) if np.ndim(confidence) == 0 else out


@dataclass
class BuildContext:
    """Forward intermediates needed by `build_gaussians_backward`."""

    camera: CameraModel
    shape: tuple[int, int]
    valid: np.ndarray        # (H, W) bool
    feats: np.ndarray        # (M, F) per valid pixel, row-major
    z_scale: np.ndarray      # (M, 3) pre-softplus
    raw_quat: np.ndarray     # (M, 4) pre-normalization
    z_color: np.ndarray      # (M, 3) pre-sigmoid
    conf_clipped: np.ndarray  # (M,) bool, confidence hit the [0, 1] clamp
    dirs_world: np.ndarray   # (M, 3) world ray directions (unit camera depth)


def build_gaussians_ctx(depth: DepthMap, features: FeatureMap, confidence: np.ndarray,
                        camera: CameraModel, heads: DecodeHeads) -> tuple[GaussianSet, BuildContext]:
    """One Gaussian per valid-depth pixel in row-major order, plus the
    backward context."""
    h, w = depth.depth.shape
    if features.data.shape[:2] != (h, w):
        raise ValueError("depth and feature maps must share resolution")
    conf = np.asarray(confidence, dtype=np.float64)
    if conf.shape != (h, w):
        raise ValueError("confidence map must share the depth resolution")
    if (camera.height, camera.width) != (h, w):
        raise ValueError("camera resolution must match the maps")
    _check_dim(features.data, heads)

    valid = depth.valid
    ys, xs = np.nonzero(valid)
    feats = features.data[ys, xs]
    d = depth.depth[ys, xs]

    z_scale = feats @ heads.scale_w.T + heads.scale_b
    raw_quat = feats @ heads.rot_w.T + heads.rot_b
    norms = np.linalg.norm(raw_quat, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateRotationError("rotation head produced a zero quaternion")
    z_color = feats @ heads.color_w.T + heads.color_b

    ray = np.stack(
        [(xs - camera.cx) / camera.fx, (ys - camera.cy) / camera.fy, np.ones_like(d)], axis=1
    )
    dirs_world = ray @ camera.rotation
    centers = (ray * d[:, None] - camera.translation) @ camera.rotation

    conf_v = conf[ys, xs]
    opac = np.clip(conf_v, 0.0, 1.0)
    gaussians = GaussianSet(
        centers, softplus(z_scale), normalize(raw_quat), opac, sigmoid(z_color), validate=False
    )
    ctx = BuildContext(
        camera, (h, w), valid, feats, z_scale, raw_quat, z_color,
        (conf_v < 0.0) | (conf_v > 1.0), dirs_world,
    )
    return gaussians, ctx


def build_gaussians(depth: DepthMap, features: FeatureMap, confidence: np.ndarray,
                    camera: CameraModel, heads: DecodeHeads) -> GaussianSet:
    return build_gaussians_ctx(depth, features, confidence, camera, heads)[0]


def build_gaussians_backward(ctx: BuildContext, grads, heads: DecodeHeads) -> dict:
    """Map per-Gaussian gradients back to per-pixel depth / features /
    confidence and to the decode head parameters.

    ``grads`` is a GaussianGrads-like object over the Gaussians produced by
    `build_gaussians_ctx` (row-major valid pixels). Returns arrays keyed
    ``depth`` (H, W), ``features`` (H, W, F), ``confidence`` (H, W) and a
    ``heads`` dict matching `DecodeHeads.params()`.
    """
    h, w = ctx.shape
    ys, xs = np.nonzero(ctx.valid)

    g_center = np.asarray(grads.centers, dtype=np.float64)
    g_depth_px = np.sum(g_center * ctx.dirs_world, axis=1)

    sig_s = sigmoid(ctx.z_scale)
    gz_scale = np.asarray(grads.scales) * sig_s
    gz_quat = normalize_backward(ctx.raw_quat, np.asarray(grads.rotations))
    sig_c = sigmoid(ctx.z_color)
    gz_color = np.asarray(grads.colors) * sig_c * (1.0 - sig_c)

    g_feats = gz_scale @ heads.scale_w + gz_quat @ heads.rot_w + gz_color @ heads.color_w
    g_conf_px = np.where(ctx.conf_clipped, 0.0, np.asarray(grads.opacities))

    g_heads = {
        "scale_w": gz_scale.T @ ctx.feats, "scale_b": gz_scale.sum(axis=0),
        "rot_w": gz_quat.T @ ctx.feats, "rot_b": gz_quat.sum(axis=0),
        "color_w": gz_color.T @ ctx.feats, "color_b": gz_color.sum(axis=0),
    }

    g_depth = np.zeros((h, w))
    g_depth[ys, xs] = g_depth_px
    g_features = np.zeros((h, w, ctx.feats.shape[1]))
    g_features[ys, xs] = g_feats
    g_conf = np.zeros((h, w))
    g_conf[ys, xs] = g_conf_px
    return {"depth": g_depth, "features": g_features, "confidence": g_conf, "heads": g_heads}
