"""Differentiable tile-based splat rasterizer with a brute-force oracle.

Forward model per pixel, over splats sorted front to back by camera depth
(ties broken by splat index):

    alpha_i = opacity_i * exp(-0.5 * d^T conic_i d),  clamped to alpha_clamp
    C       = sum_i color_i * alpha_i * T_i + background * T_end
    T_i     = prod_{j<i} (1 - alpha_j)

The screen-space covariance comes from the usual affine (EWA) approximation
cov2d = J W cov3d W^T J^T evaluated at the splat center, plus a fixed 0.3 px
low-pass dilation. The accumulated alpha map is 1 - T_end and the depth map is
the alpha-normalized weighted sum of splat depths.

`rasterize` and `render_oracle` share one contract; the oracle skips tiling,
bounding-radius culling and the transmittance early-exit. At the default
cutoff of 6.5 sigma the Gaussian tail beyond the binning radius is ~7e-10, so
the two stay well inside 1e-5 per channel; training configs may shrink the
cutoff for speed at the cost of that equivalence. `rasterize_backward`
returns analytic gradients for every splat parameter and matches central
finite differences; it recomputes the per-tile sorted lists rather than
storing them, optionally reusing the forward pass's per-pixel counters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import quaternions as quat
from ._kernels import (
    HAVE_NUMBA,
    composite_image,
    composite_image_backward,
    project_backward_kernel,
    project_forward,
)
from .scene import CameraModel, DepthMap, GaussianSet, ImageBuffer

__all__ = [
    "RasterSettings",
    "Splat2D",
    "RenderOutput",
    "RasterCache",
    "GaussianGrads",
    "project_gaussian",
    "rasterize",
    "render_oracle",
    "rasterize_backward",
]


@dataclass(frozen=True)
class RasterSettings:
    background: tuple[float, float, float] = (0.5, 0.5, 0.5)
    near_plane: float = 0.1
    tile_size: int = 16
    alpha_clamp: float = 0.9999
    transmittance_floor: float = 1e-6
    lowpass: float = 0.3
    depth_valid_alpha: float = 1e-3
    cutoff_sigma: float = 6.5

    @property
    def s_cut(self) -> float:
        return 0.5 * self.cutoff_sigma**2


@dataclass(frozen=True)
class Splat2D:
    """A projected splat: pixel-space mean, 2x2 covariance (low-pass included),
    camera depth of the center, and the source opacity/color."""

    mean: np.ndarray
    covariance: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=np.float64).reshape(2, 2)
        eig = np.linalg.eigvalsh(cov)
        if eig[0] <= 0:
            raise ValueError("2-d covariance must be positive definite")
        if not self.depth > 0:
            raise ValueError("splat depth must be positive")


@dataclass(frozen=True)
class RenderOutput:
    """Rendered color, accumulated alpha in [0, 1], and expected depth.

    ``depth`` is the alpha-normalized expected depth (valid where the
    accumulated alpha clears ``depth_valid_alpha``); ``depth_raw`` keeps the
    unnormalized weighted sum that the backward pass differentiates.
    """

    color: ImageBuffer
    alpha: np.ndarray
    depth: DepthMap
    depth_raw: np.ndarray


@dataclass
class RasterCache:
    """Forward-pass state that lets the backward pass skip its replay: the
    per-pixel transmittance/contributor counters plus the projection and tile
    binning of the splat set."""

    t_final: np.ndarray
    n_contrib: np.ndarray
    proj: "_Projection | None" = None
    src: np.ndarray | None = None
    bounds: np.ndarray | None = None
    entries: tuple | None = None


@dataclass
class GaussianGrads:
    """Per-splat gradients mirroring the GaussianPrimitive fields."""

    centers: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    @staticmethod
    def zeros(n: int) -> "GaussianGrads":
        return GaussianGrads(
            np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n), np.zeros((n, 3))
        )

    def add_(self, other: "GaussianGrads"):
        self.centers += other.centers
        self.scales += other.scales
        self.rotations += other.rotations
        self.opacities += other.opacities
        self.colors += other.colors
        return self


def _as_set(gaussians) -> GaussianSet:
    if isinstance(gaussians, GaussianSet):
        return gaussians
    return GaussianSet.from_primitives(list(gaussians))


def _check_finite(g: GaussianSet):
    for name, arr in (
        ("centers", g.centers), ("scales", g.scales), ("rotations", g.rotations),
        ("opacities", g.opacities), ("colors", g.colors),
    ):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite gaussian {name}")


@dataclass
class _Projection:
    """Vectorized projection intermediates for the kept splats."""

    keep: np.ndarray          # (N,) bool, survived near-plane + screen culling
    idx: np.ndarray           # (M,) indices of kept splats
    p_cam: np.ndarray         # (M, 3)
    mean2d: np.ndarray        # (M, 2)
    cov2d: np.ndarray         # (M, 3) = (a, b, c) upper triangle
    conic: np.ndarray         # (M, 3) = (A, B, C) of the inverse covariance
    radius: np.ndarray        # (M,) bounding radius in pixels
    bbox: np.ndarray          # (M, 4) tight x0, x1, y0, y1 of the cutoff ellipse
    z: np.ndarray             # (M,)
    m_mat: np.ndarray | None = None    # (M, 2, 3) = J @ W (numpy path only)
    cov3d: np.ndarray | None = None    # (M, 6) packed upper triangle
    rot_mats: np.ndarray | None = None


def _cov3d_upper(rot: np.ndarray, s2: np.ndarray) -> np.ndarray:
    """Upper triangle of R diag(s2) R^T as (N, 6)."""
    out = np.empty((rot.shape[0], 6))
    k = 0
    for i in range(3):
        for j in range(i, 3):
            out[:, k] = (rot[:, i, 0] * s2[:, 0] * rot[:, j, 0]
                         + rot[:, i, 1] * s2[:, 1] * rot[:, j, 1]
                         + rot[:, i, 2] * s2[:, 2] * rot[:, j, 2])
            k += 1
    return out


def _project_arrays(g: GaussianSet, camera: CameraModel, settings: RasterSettings,
                    screen_cull: bool = True) -> _Projection:
    if HAVE_NUMBA:
        n = len(g)
        keep = np.empty(n, np.bool_)
        p_cam = np.empty((n, 3))
        mean2d = np.empty((n, 2))
        cov2d = np.empty((n, 3))
        conic = np.empty((n, 3))
        radius = np.empty(n)
        bbox = np.empty((n, 4))
        project_forward(
            g.centers, g.scales, g.rotations, camera.rotation, camera.translation,
            camera.fx, camera.fy, camera.cx, camera.cy,
            float(camera.width), float(camera.height),
            settings.near_plane, settings.lowpass, settings.cutoff_sigma,
            screen_cull,
            keep, p_cam, mean2d, cov2d, conic, radius, bbox,
        )
        idx = np.nonzero(keep)[0]
        pc = p_cam[idx]
        return _Projection(keep, idx, pc, mean2d[idx], cov2d[idx], conic[idx],
                           radius[idx], bbox[idx], pc[:, 2])
    w_rot = camera.rotation
    p_cam = g.centers @ w_rot.T + camera.translation
    keep = p_cam[:, 2] > settings.near_plane

    idx = np.nonzero(keep)[0]
    pc = p_cam[idx]
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]

    rot_mats = quat.to_rotation_matrices(g.rotations[idx])
    s2 = g.scales[idx] ** 2
    c3 = _cov3d_upper(rot_mats, s2)  # (M, 6): xx xy xz yy yz zz

    # M = J W with J = [[fx/z, 0, -fx x/z^2], [0, fy/z, -fy y/z^2]]
    inv_z = 1.0 / z
    a_j = camera.fx * inv_z
    b_j = -camera.fx * x * inv_z**2
    c_j = camera.fy * inv_z
    d_j = -camera.fy * y * inv_z**2
    m = np.empty((idx.size, 2, 3))
    for k in range(3):
        m[:, 0, k] = a_j * w_rot[0, k] + b_j * w_rot[2, k]
        m[:, 1, k] = c_j * w_rot[1, k] + d_j * w_rot[2, k]

    # cov2d = M cov3d M^T, expanded over the packed upper triangle
    xx, xy, xz, yy, yz, zz = (c3[:, 0], c3[:, 1], c3[:, 2], c3[:, 3], c3[:, 4], c3[:, 5])

    def quad(u0, u1, u2, v0, v1, v2):
        return (u0 * (xx * v0 + xy * v1 + xz * v2)
                + u1 * (xy * v0 + yy * v1 + yz * v2)
                + u2 * (xz * v0 + yz * v1 + zz * v2))

    m00, m01, m02 = m[:, 0, 0], m[:, 0, 1], m[:, 0, 2]
    m10, m11, m12 = m[:, 1, 0], m[:, 1, 1], m[:, 1, 2]
    cov_a = quad(m00, m01, m02, m00, m01, m02) + settings.lowpass
    cov_b = quad(m00, m01, m02, m10, m11, m12)
    cov_c = quad(m10, m11, m12, m10, m11, m12) + settings.lowpass
    cov2d = np.stack([cov_a, cov_b, cov_c], axis=1)

    det = cov_a * cov_c - cov_b * cov_b
    conic = np.stack([cov_c / det, -cov_b / det, cov_a / det], axis=1)

    mid = 0.5 * (cov_a + cov_c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = settings.cutoff_sigma * np.sqrt(lam_max)
    rx = settings.cutoff_sigma * np.sqrt(cov_a)
    ry = settings.cutoff_sigma * np.sqrt(cov_c)

    mean2d = np.stack([camera.fx * x * inv_z + camera.cx,
                       camera.fy * y * inv_z + camera.cy], axis=1)
    bbox = np.stack([mean2d[:, 0] - rx, mean2d[:, 0] + rx,
                     mean2d[:, 1] - ry, mean2d[:, 1] + ry], axis=1)

    if screen_cull:
        on = (
            (bbox[:, 1] >= 0.0)
            & (bbox[:, 0] <= camera.width - 1.0)
            & (bbox[:, 3] >= 0.0)
            & (bbox[:, 2] <= camera.height - 1.0)
        )
        keep[idx[~on]] = False
        idx, pc, mean2d, cov2d, conic, radius, bbox = (
            idx[on], pc[on], mean2d[on], cov2d[on], conic[on], radius[on], bbox[on],
        )
        m, c3, rot_mats = m[on], c3[on], rot_mats[on]

    return _Projection(keep, idx, pc, mean2d, cov2d, conic, radius, bbox, pc[:, 2],
                       m, c3, rot_mats)


def project_gaussian(g, camera: CameraModel, settings: RasterSettings = RasterSettings()):
    """Project one Gaussian; returns a Splat2D or None when culled."""
    gs = _as_set([g]) if not isinstance(g, GaussianSet) else g
    proj = _project_arrays(gs, camera, settings)
    if proj.idx.size == 0:
        return None
    cov = np.array([[proj.cov2d[0, 0], proj.cov2d[0, 1]],
                    [proj.cov2d[0, 1], proj.cov2d[0, 2]]])
    return Splat2D(
        proj.mean2d[0], cov, float(proj.z[0]),
        float(gs.opacities[proj.idx[0]]), gs.colors[proj.idx[0]],
    )


def _tile_entries(proj: _Projection, camera: CameraModel, settings: RasterSettings):
    """Duplicate each kept splat into every tile its bounding box overlaps,
    sorted by (tile, depth, splat index). Returns per-entry gather indices into
    the projection arrays plus tile run boundaries."""
    ts = settings.tile_size
    ntx = (camera.width + ts - 1) // ts
    nty = (camera.height + ts - 1) // ts
    m = proj.idx.size
    if m == 0:
        return np.zeros(0, np.int64), np.zeros(ntx * nty + 1, np.int64), ntx, nty

    bb = proj.bbox
    tx0 = np.clip(np.floor(bb[:, 0] / ts).astype(np.int64), 0, ntx - 1)
    tx1 = np.clip(np.floor(bb[:, 1] / ts).astype(np.int64), 0, ntx - 1)
    ty0 = np.clip(np.floor(bb[:, 2] / ts).astype(np.int64), 0, nty - 1)
    ty1 = np.clip(np.floor(bb[:, 3] / ts).astype(np.int64), 0, nty - 1)
    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    cnt = nx * ny
    total = int(cnt.sum())

    src = np.repeat(np.arange(m), cnt)
    start = np.concatenate([[0], np.cumsum(cnt)[:-1]])
    local = np.arange(total) - np.repeat(start, cnt)
    nx_r = nx[src]
    tile_x = tx0[src] + local % nx_r
    tile_y = ty0[src] + local // nx_r
    tile_id = tile_y * ntx + tile_x

    order = np.lexsort((src, proj.z[src], tile_id))
    src = src[order]
    tile_id = tile_id[order]
    bounds = np.searchsorted(tile_id, np.arange(ntx * nty + 1))
    return src, bounds, ntx, nty


def _gather_entries(g: GaussianSet, proj: _Projection, src: np.ndarray):
    return (
        np.ascontiguousarray(proj.mean2d[src]),
        np.ascontiguousarray(proj.conic[src]),
        np.ascontiguousarray(proj.bbox[src]),
        np.ascontiguousarray(g.opacities[proj.idx[src]]),
        np.ascontiguousarray(g.colors[proj.idx[src]]),
        np.ascontiguousarray(proj.z[src]),
    )


def rasterize(gaussians, camera: CameraModel,
              settings: RasterSettings = RasterSettings(),
              return_cache: bool = False):
    """Render a splat set; see the module docstring for the forward model."""
    g = _as_set(gaussians)
    _check_finite(g)
    h, w = camera.height, camera.width
    ts = settings.tile_size
    bg = np.asarray(settings.background, dtype=np.float64)

    color = np.empty((h, w, 3))
    color[:] = bg
    alpha = np.zeros((h, w))
    depth_raw = np.zeros((h, w))
    t_final = np.ones((h, w))
    n_contrib = np.zeros((h, w), np.int64)

    proj = _project_arrays(g, camera, settings)
    src, bounds, ntx, nty = _tile_entries(proj, camera, settings)
    if src.size:
        e_mean, e_conic, e_bbox, e_opac, e_color, e_z = _gather_entries(g, proj, src)
        composite_image(
            h, w, ts, ntx,
            bounds, e_mean, e_conic, e_bbox, e_opac, e_color, e_z,
            bg, settings.alpha_clamp, settings.transmittance_floor, settings.s_cut,
            color, alpha, depth_raw, t_final, n_contrib,
        )
    out = _package_output(color, alpha, depth_raw, settings)
    if return_cache:
        cache = RasterCache(t_final, n_contrib, proj, src, bounds)
        if src.size:
            cache.entries = (e_mean, e_conic, e_bbox, e_opac, e_color, e_z)
        return out, cache
    return out


def _package_output(color, alpha, depth_raw, settings: RasterSettings) -> RenderOutput:
    valid = alpha > settings.depth_valid_alpha
    depth = np.where(valid, depth_raw / np.maximum(alpha, settings.depth_valid_alpha), 1.0)
    return RenderOutput(
        color=ImageBuffer(np.clip(color, 0.0, 1.0)),
        alpha=alpha,
        depth=DepthMap(depth, valid),
        depth_raw=depth_raw,
    )


def render_oracle(gaussians, camera: CameraModel,
                  settings: RasterSettings = RasterSettings(),
                  row_chunk: int = 16) -> RenderOutput:
    """Reference renderer: per pixel over all splats, globally depth-sorted,
    no tiling, no bounding-radius culling, no early exit."""
    g = _as_set(gaussians)
    _check_finite(g)
    h, w = camera.height, camera.width
    bg = np.asarray(settings.background, dtype=np.float64)

    proj = _project_arrays(g, camera, settings, screen_cull=False)
    order = np.lexsort((proj.idx, proj.z))
    mean2d = proj.mean2d[order]
    conic = proj.conic[order]
    opac = g.opacities[proj.idx[order]]
    col = g.colors[proj.idx[order]]
    z = proj.z[order]

    color = np.empty((h, w, 3))
    color[:] = bg
    alpha = np.zeros((h, w))
    depth_raw = np.zeros((h, w))
    if mean2d.shape[0] == 0:
        return _package_output(color, alpha, depth_raw, settings)

    xs = np.arange(w, dtype=np.float64)
    for y0 in range(0, h, row_chunk):
        y1 = min(h, y0 + row_chunk)
        ys = np.arange(y0, y1, dtype=np.float64)
        dx = xs[None, :, None] - mean2d[None, None, :, 0].reshape(1, 1, -1)
        dy = ys[:, None, None] - mean2d[None, None, :, 1].reshape(1, 1, -1)
        s = 0.5 * (conic[:, 0] * dx**2 + conic[:, 2] * dy**2) + conic[:, 1] * dx * dy
        a = np.minimum(opac * np.exp(-s), settings.alpha_clamp)
        t = np.cumprod(1.0 - a, axis=2)
        t_excl = np.concatenate([np.ones_like(t[:, :, :1]), t[:, :, :-1]], axis=2)
        wgt = a * t_excl
        color[y0:y1] = wgt @ col + t[:, :, -1:] * bg
        alpha[y0:y1] = 1.0 - t[:, :, -1]
        depth_raw[y0:y1] = wgt @ z
    return _package_output(color, alpha, depth_raw, settings)


def rasterize_backward(gaussians, camera: CameraModel,
                       grad_color: np.ndarray,
                       grad_alpha: np.ndarray | None = None,
                       grad_depth_raw: np.ndarray | None = None,
                       settings: RasterSettings = RasterSettings(),
                       cache: RasterCache | None = None) -> GaussianGrads:
    """Analytic gradients of the rasterized color / alpha / raw-depth images
    with respect to every Gaussian parameter.

    ``grad_color`` is (H, W, 3); the optional maps are (H, W). The depth
    gradient refers to ``RenderOutput.depth_raw`` (the unnormalized weighted
    sum); normalized-depth chains divide out alpha at the loss site. Passing
    the forward ``cache`` skips the per-pixel forward replay.
    """
    g = _as_set(gaussians)
    _check_finite(g)
    h, w = camera.height, camera.width
    ts = settings.tile_size
    bg = np.asarray(settings.background, dtype=np.float64)
    grad_color = np.asarray(grad_color, dtype=np.float64).reshape(h, w, 3)
    grad_alpha = (np.zeros((h, w)) if grad_alpha is None
                  else np.asarray(grad_alpha, dtype=np.float64).reshape(h, w))
    grad_depth_raw = (np.zeros((h, w)) if grad_depth_raw is None
                      else np.asarray(grad_depth_raw, dtype=np.float64).reshape(h, w))

    grads = GaussianGrads.zeros(len(g))
    if cache is not None and cache.proj is not None:
        proj, src, bounds = cache.proj, cache.src, cache.bounds
        ntx = (w + ts - 1) // ts
    else:
        proj = _project_arrays(g, camera, settings)
        src, bounds, ntx, _ = _tile_entries(proj, camera, settings)
    if src.size == 0:
        return grads

    if cache is not None and cache.entries is not None:
        e_mean, e_conic, e_bbox, e_opac, e_color, e_z = cache.entries
    else:
        e_mean, e_conic, e_bbox, e_opac, e_color, e_z = _gather_entries(g, proj, src)

    ge_mean = np.zeros_like(e_mean)
    ge_conic = np.zeros_like(e_conic)
    ge_opac = np.zeros_like(e_opac)
    ge_color = np.zeros_like(e_color)
    ge_z = np.zeros_like(e_z)

    if cache is None:
        scratch_c = np.empty((h, w, 3))
        scratch_a = np.empty((h, w))
        scratch_d = np.empty((h, w))
        t_final = np.ones((h, w))
        n_contrib = np.zeros((h, w), np.int64)
        composite_image(
            h, w, ts, ntx,
            bounds, e_mean, e_conic, e_bbox, e_opac, e_color, e_z,
            bg, settings.alpha_clamp, settings.transmittance_floor, settings.s_cut,
            scratch_c, scratch_a, scratch_d, t_final, n_contrib,
        )
    else:
        t_final, n_contrib = cache.t_final, cache.n_contrib
    composite_image_backward(
        h, w, ts, ntx,
        bounds, e_mean, e_conic, e_bbox, e_opac, e_color, e_z,
        bg, settings.alpha_clamp, settings.s_cut,
        t_final, n_contrib,
        grad_color, grad_alpha, grad_depth_raw,
        ge_mean, ge_conic, ge_opac, ge_color, ge_z,
    )

    # fold duplicated tile entries back onto the kept splats
    m = proj.idx.size

    def fold(values):
        if values.ndim == 1:
            return np.bincount(src, weights=values, minlength=m)
        return np.stack([np.bincount(src, weights=values[:, k], minlength=m)
                         for k in range(values.shape[1])], axis=1)

    g_mean = fold(ge_mean)
    g_conic = fold(ge_conic)
    g_opac_k = fold(ge_opac)
    g_color_k = fold(ge_color)
    g_z_comp = fold(ge_z)

    out = _project_backward(g, camera, settings, proj, g_mean, g_conic, g_z_comp)
    grads.centers[proj.idx] = out["centers"]
    grads.scales[proj.idx] = out["scales"]
    grads.rotations[proj.idx] = out["rotations"]
    grads.opacities[proj.idx] = g_opac_k
    grads.colors[proj.idx] = g_color_k
    return grads


def _project_backward(g: GaussianSet, camera: CameraModel, settings: RasterSettings,
                      proj: _Projection, g_mean: np.ndarray, g_conic: np.ndarray,
                      g_z_comp: np.ndarray) -> dict:
    """Chain pixel-space gradients (mean, conic, composited depth) back to the
    3-d center / scale / rotation of the kept splats."""
    if HAVE_NUMBA:
        m = proj.idx.size
        g_center = np.empty((m, 3))
        g_scale = np.empty((m, 3))
        g_quat = np.empty((m, 4))
        project_backward_kernel(
            np.ascontiguousarray(g.scales[proj.idx]),
            np.ascontiguousarray(g.rotations[proj.idx]),
            camera.rotation, proj.p_cam, proj.cov2d,
            camera.fx, camera.fy,
            g_mean, g_conic, g_z_comp,
            g_center, g_scale, g_quat,
        )
        return {"centers": g_center, "scales": g_scale, "rotations": g_quat}
    idx = proj.idx
    pc = proj.p_cam
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    fx, fy = camera.fx, camera.fy
    w_rot = camera.rotation

    # conic -> 2d covariance: K = cov^-1, dL/dcov = -K G_K K (packed a, b, c)
    a = proj.cov2d[:, 0]
    b = proj.cov2d[:, 1]
    c = proj.cov2d[:, 2]
    det = a * c - b * b
    ka = c / det
    kb = -b / det
    kc = a / det
    ga, gb, gc = g_conic[:, 0], 0.5 * g_conic[:, 1], g_conic[:, 2]
    # full-matrix product -K [ [ga, gb], [gb, gc] ] K, exploiting symmetry
    t00 = ka * ga + kb * gb
    t01 = ka * gb + kb * gc
    t10 = kb * ga + kc * gb
    t11 = kb * gb + kc * gc
    gcov_a = -(t00 * ka + t01 * kb)
    gcov_b = -(t00 * kb + t01 * kc)
    gcov_b2 = -(t10 * ka + t11 * kb)
    gcov_c = -(t10 * kb + t11 * kc)
    gcov_b = gcov_b + gcov_b2  # both off-diagonal slots of the symmetric grad

    # cov2d = M cov3d M^T: dL/dM = 2 G M cov3d, dL/dcov3d = M^T G M
    m00, m01, m02 = proj.m_mat[:, 0, 0], proj.m_mat[:, 0, 1], proj.m_mat[:, 0, 2]
    m10, m11, m12 = proj.m_mat[:, 1, 0], proj.m_mat[:, 1, 1], proj.m_mat[:, 1, 2]
    xx, xy, xz, yy, yz, zz = (proj.cov3d[:, 0], proj.cov3d[:, 1], proj.cov3d[:, 2],
                              proj.cov3d[:, 3], proj.cov3d[:, 4], proj.cov3d[:, 5])
    half_b = 0.5 * gcov_b

    # rows of (G M): G = [[gcov_a, half_b], [half_b, gcov_c]]
    gm0 = [gcov_a * m00 + half_b * m10, gcov_a * m01 + half_b * m11, gcov_a * m02 + half_b * m12]
    gm1 = [half_b * m00 + gcov_c * m10, half_b * m01 + gcov_c * m11, half_b * m02 + gcov_c * m12]

    def sig_row(v):
        return (v[0] * xx + v[1] * xy + v[2] * xz,
                v[0] * xy + v[1] * yy + v[2] * yz,
                v[0] * xz + v[1] * yz + v[2] * zz)

    g_m = np.empty_like(proj.m_mat)
    r0 = sig_row(gm0)
    r1 = sig_row(gm1)
    for k in range(3):
        g_m[:, 0, k] = 2.0 * r0[k]
        g_m[:, 1, k] = 2.0 * r1[k]

    # dL/dcov3d = M^T G M (packed upper triangle, off-diagonals doubled)
    mt_g0 = [m00 * gcov_a + m10 * half_b, m01 * gcov_a + m11 * half_b, m02 * gcov_a + m12 * half_b]
    mt_g1 = [m00 * half_b + m10 * gcov_c, m01 * half_b + m11 * gcov_c, m02 * half_b + m12 * gcov_c]
    g3 = np.empty((idx.size, 3, 3))
    for i in range(3):
        for j in range(3):
            g3[:, i, j] = mt_g0[i] * proj.m_mat[:, 0, j] + mt_g1[i] * proj.m_mat[:, 1, j]

    # cov3d = R diag(s^2) R^T
    rot = proj.rot_mats
    s_k = g.scales[idx]
    sym = g3 + np.transpose(g3, (0, 2, 1))
    g_rot = np.matmul(sym, rot) * (s_k**2)[:, None, :]
    inner_diag = np.einsum("nji,njk,nki->ni", rot, g3, rot, optimize=True)
    g_scale = 2.0 * s_k * inner_diag
    g_quat = quat.rotation_backward(g.rotations[idx], g_rot)

    # M = J W -> J; J depends on (x, y, z)
    g_j = np.matmul(g_m, w_rot.T)
    g_pc = np.zeros_like(pc)
    inv_z = 1.0 / z
    inv_z2 = inv_z * inv_z
    g_pc[:, 0] = g_j[:, 0, 2] * (-fx * inv_z2)
    g_pc[:, 1] = g_j[:, 1, 2] * (-fy * inv_z2)
    g_pc[:, 2] = (
        g_j[:, 0, 0] * (-fx * inv_z2)
        + g_j[:, 0, 2] * (2.0 * fx * x * inv_z2 * inv_z)
        + g_j[:, 1, 1] * (-fy * inv_z2)
        + g_j[:, 1, 2] * (2.0 * fy * y * inv_z2 * inv_z)
    )

    # pixel mean and the composited depth channel
    g_pc[:, 0] += g_mean[:, 0] * fx * inv_z
    g_pc[:, 1] += g_mean[:, 1] * fy * inv_z
    g_pc[:, 2] += -(g_mean[:, 0] * fx * x + g_mean[:, 1] * fy * y) * inv_z2
    g_pc[:, 2] += g_z_comp

    return {
        "centers": g_pc @ w_rot,
        "scales": g_scale,
        "rotations": g_quat,
    }
