"""Training losses: photometric reconstruction, depth smoothness, virtual-lane
cycle consistency, and the multi-lane denoiser-prior term.

All losses are non-negative, vanish on their fixed points, and come with
analytic gradients w.r.t. the rendered quantities. The denoiser term treats
the refined images as a frozen target (the prior may be a remote service), so
its gradient is taken with the target detached.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .scene import DepthMap, ImageBuffer, SceneBundle
from .geometry import LaneSwitchConfig

__all__ = [
    "LossWeights",
    "BETA_SCHEDULES",
    "recon_loss",
    "recon_loss_grad",
    "depth_smoothness_loss",
    "depth_smoothness_grad",
    "switch_loss",
    "perceptual_proxy",
    "perceptual_proxy_grad",
    "diffusion_loss",
    "diffusion_loss_with_grad",
    "total_loss",
]

LANE_TAGS = ("left", "middle", "right")

BETA_SCHEDULES: dict[str, Callable[[float], float]] = {
    "one_minus_t": lambda t: 1.0 - t,
    "constant": lambda t: 1.0,
}


@dataclass(frozen=True)
class LossWeights:
    """Per-term weights (unit by default), the depth smoothing factor, the
    noise-weight schedule and the number of sampled noise levels per
    evaluation."""

    lambda_smooth: float = 0.5
    recon: float = 1.0
    depth: float = 1.0
    switch: float = 1.0
    diffusion: float = 1.0
    beta_schedule: str = "one_minus_t"
    t_steps: int = 1

    def __post_init__(self):
        for name in ("lambda_smooth", "recon", "depth", "switch", "diffusion"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.beta_schedule not in BETA_SCHEDULES:
            raise ValueError(f"unknown beta schedule {self.beta_schedule!r}")
        if self.t_steps < 1:
            raise ValueError("t_steps must be at least 1")

    def beta(self, t: float) -> float:
        return float(BETA_SCHEDULES[self.beta_schedule](float(t)))


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, ImageBuffer) else np.asarray(img, dtype=np.float64)


def recon_loss(truth, rendered) -> float:
    """Mean squared error over all pixel-channels."""
    a, b = _pixels(truth), _pixels(rendered)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def recon_loss_grad(truth, rendered) -> np.ndarray:
    """d recon_loss / d rendered."""
    a, b = _pixels(truth), _pixels(rendered)
    return 2.0 * (b - a) / a.size


def _smooth_stencil(depth: DepthMap):
    d, v = depth.depth, depth.valid
    h, w = d.shape
    if h < 3 or w < 3:
        raise ValueError("depth smoothness needs at least a 3x3 map")
    ok = v[1:-1, 1:-1] & v[1:-1, :-2] & v[1:-1, 2:] & v[:-2, 1:-1] & v[2:, 1:-1]
    if not np.any(ok):
        raise ValueError("no interior pixel has a fully valid stencil")
    dx = 0.5 * (d[1:-1, 2:] - d[1:-1, :-2])
    dy = 0.5 * (d[2:, 1:-1] - d[:-2, 1:-1])
    dxx = d[1:-1, 2:] - 2.0 * d[1:-1, 1:-1] + d[1:-1, :-2]
    dyy = d[2:, 1:-1] - 2.0 * d[1:-1, 1:-1] + d[:-2, 1:-1]
    return ok, dx, dy, dxx, dyy


def depth_smoothness_loss(depth: DepthMap, lambda_smooth: float) -> float:
    """Mean over interior valid pixels of |dD/dx| + |dD/dy| plus
    lambda * (|d2D/dx2| + |d2D/dy2|), central differences; pixels whose
    stencil touches the border or an invalid pixel are excluded."""
    ok, dx, dy, dxx, dyy = _smooth_stencil(depth)
    term = np.abs(dx) + np.abs(dy) + lambda_smooth * (np.abs(dxx) + np.abs(dyy))
    return float(term[ok].mean())


def depth_smoothness_grad(depth: DepthMap, lambda_smooth: float) -> np.ndarray:
    """Subgradient of `depth_smoothness_loss` w.r.t. the depth values."""
    ok, dx, dy, dxx, dyy = _smooth_stencil(depth)
    n = float(ok.sum())
    g = np.zeros_like(depth.depth)
    sx = np.where(ok, np.sign(dx), 0.0) / n
    sy = np.where(ok, np.sign(dy), 0.0) / n
    sxx = lambda_smooth * np.where(ok, np.sign(dxx), 0.0) / n
    syy = lambda_smooth * np.where(ok, np.sign(dyy), 0.0) / n
    g[1:-1, 2:] += 0.5 * sx + sxx
    g[1:-1, :-2] += -0.5 * sx + sxx
    g[1:-1, 1:-1] += -2.0 * sxx
    g[2:, 1:-1] += 0.5 * sy + syy
    g[:-2, 1:-1] += -0.5 * sy + syy
    g[1:-1, 1:-1] += -2.0 * syy
    return g


def switch_loss(truth_images, bundle: SceneBundle, cfg: LaneSwitchConfig, pipeline) -> float:
    """Cycle-consistency loss: shift every frame to its virtual lane, rebuild
    the scene from those renders, render back at the original poses, and take
    the mean squared error against the captured images.

    ``pipeline`` must provide ``render_cycle(bundle, cfg) -> list of images``
    implementing the shift-and-return composite.
    """
    cycled = pipeline.render_cycle(bundle, cfg)
    truth_images = list(truth_images)
    if len(cycled) != len(truth_images):
        raise ValueError("cycle returned a different number of frames than the truth set")
    total = 0.0
    for t, c in zip(truth_images, cycled):
        total += recon_loss(t, c)
    return total / len(truth_images)


# -- perceptual proxy ------------------------------------------------------

def _box_down(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    h2, w2 = h // 2, w // 2
    v = img[: h2 * 2, : w2 * 2]
    return 0.25 * (v[0::2, 0::2] + v[1::2, 0::2] + v[0::2, 1::2] + v[1::2, 1::2])


def _box_down_adjoint(g: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(shape)
    h2, w2 = g.shape[:2]
    for oy in (0, 1):
        for ox in (0, 1):
            out[oy : h2 * 2 : 2, ox : w2 * 2 : 2] += 0.25 * g
    return out


def perceptual_proxy(a, b, scales: int = 3) -> float:
    """Mean absolute difference of forward-difference image gradients at
    ``scales`` dyadic scales. A cheap, documented stand-in for a learned
    perceptual metric; swappable wherever it is used."""
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise ValueError(f"image shapes differ: {pa.shape} vs {pb.shape}")
    total = 0.0
    for _ in range(scales):
        gxa = pa[:, 1:] - pa[:, :-1]
        gxb = pb[:, 1:] - pb[:, :-1]
        gya = pa[1:] - pa[:-1]
        gyb = pb[1:] - pb[:-1]
        total += 0.5 * (np.abs(gxa - gxb).mean() + np.abs(gya - gyb).mean())
        pa, pb = _box_down(pa), _box_down(pb)
    return float(total / scales)


def perceptual_proxy_grad(a, b, scales: int = 3) -> np.ndarray:
    """Subgradient of `perceptual_proxy` w.r.t. the first image."""
    pa, pb = _pixels(a), _pixels(b)
    levels = []
    for _ in range(scales):
        levels.append((pa, pb))
        pa, pb = _box_down(pa), _box_down(pb)
    grad = None
    for pa, pb in reversed(levels):
        g = np.zeros_like(pa)
        gxa = pa[:, 1:] - pa[:, :-1]
        gxb = pb[:, 1:] - pb[:, :-1]
        gya = pa[1:] - pa[:-1]
        gyb = pb[1:] - pb[:-1]
        sx = np.sign(gxa - gxb) * (0.5 / (gxa.size * scales))
        sy = np.sign(gya - gyb) * (0.5 / (gya.size * scales))
        g[:, 1:] += sx
        g[:, :-1] -= sx
        g[1:] += sy
        g[:-1] -= sy
        if grad is not None:
            g += _box_down_adjoint(grad, pa.shape)
        grad = g
    return grad


# -- multi-lane denoiser term ----------------------------------------------

def _check_lanes(renders: Mapping[str, object]):
    missing = [t for t in LANE_TAGS if t not in renders]
    if missing:
        raise ValueError(f"missing lane renders: {', '.join(missing)}")


def diffusion_loss(multi_lane_renders: Mapping[str, object], prior, weights: LossWeights,
                   noise_level: float) -> float:
    """beta(t) * mean over the lane poses of (L1 + perceptual proxy) between
    each render and its denoised counterpart."""
    return diffusion_loss_with_grad(multi_lane_renders, prior, weights, noise_level)[0]


def diffusion_loss_with_grad(multi_lane_renders: Mapping[str, object], prior,
                             weights: LossWeights, noise_level: float):
    """Like `diffusion_loss` but also returns d loss / d render per lane tag,
    with the denoised targets held fixed."""
    _check_lanes(multi_lane_renders)
    tags = list(LANE_TAGS)
    imgs = [multi_lane_renders[t] for t in tags]
    refined = prior.refine([img if isinstance(img, ImageBuffer) else ImageBuffer(_pixels(img))
                            for img in imgs], noise_level)
    if len(refined) != len(imgs):
        raise ValueError("prior returned a different number of images")
    beta = weights.beta(noise_level)
    total = 0.0
    grads: dict[str, np.ndarray] = {}
    for tag, img, ref in zip(tags, imgs, refined):
        y = _pixels(img)
        yr = _pixels(ref)
        if yr.shape != y.shape:
            raise ValueError(f"prior changed the shape of the {tag} render")
        l1 = float(np.abs(y - yr).mean())
        px = perceptual_proxy(y, yr)
        total += l1 + px
        grads[tag] = beta / len(tags) * (
            np.sign(y - yr) / y.size + perceptual_proxy_grad(y, yr)
        )
    return beta * total / len(tags), grads


_TERMS = ("recon", "depth", "switch", "diffusion")


def total_loss(components: Mapping[str, float], weights: LossWeights) -> float:
    """Weighted sum of the four loss terms; a non-finite term raises an error
    naming it."""
    total = 0.0
    for term in _TERMS:
        value = float(components.get(term, 0.0))
        if not np.isfinite(value):
            raise ValueError(f"loss term {term!r} is not finite ({value})")
        total += getattr(weights, term) * value
    return total
