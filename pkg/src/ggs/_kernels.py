"""Compiled whole-image drivers for the splat rasterizer.

The image is processed tile by tile; tiles touch disjoint pixel regions and
disjoint slices of the per-entry gradient arrays, so the parallel loop over
tiles is race-free and bit-deterministic regardless of thread count. Compiled
with numba when available; the pure-Python fallbacks run the same code.
"""

from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False
    prange = range

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap


@njit(cache=True, parallel=True)
def composite_image(
    height, width, tile_size, n_tx,
    bounds, mean2d, conic, bbox, opacity, color, depth,
    bg, alpha_clamp, t_floor, s_cut,
    out_color, out_alpha, out_depth_raw, out_t_final, out_n_contrib,
):
    """Front-to-back compositing of depth-sorted per-tile splat lists.

    out_color gets background blended in; out_depth_raw is the bare weighted
    depth sum. out_n_contrib records how many list entries each pixel scanned
    before the transmittance floor tripped, so the backward pass can replay
    the exact same prefix.
    """
    n_tiles = bounds.shape[0] - 1
    for tile in prange(n_tiles):
        s = bounds[tile]
        e = bounds[tile + 1]
        x0 = (tile % n_tx) * tile_size
        y0 = (tile // n_tx) * tile_size
        th = min(tile_size, height - y0)
        tw = min(tile_size, width - x0)
        for iy in range(th):
            py = float(y0 + iy)
            for ix in range(tw):
                px = float(x0 + ix)
                t = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                dsum = 0.0
                n = 0
                for j in range(s, e):
                    if t < t_floor:
                        break
                    n = j - s + 1
                    if px < bbox[j, 0] or px > bbox[j, 1] or py < bbox[j, 2] or py > bbox[j, 3]:
                        continue
                    dx = px - mean2d[j, 0]
                    dy = py - mean2d[j, 1]
                    sv = 0.5 * (conic[j, 0] * dx * dx + conic[j, 2] * dy * dy) \
                        + conic[j, 1] * dx * dy
                    if sv > s_cut or sv < 0.0:
                        continue
                    a = opacity[j] * math.exp(-sv)
                    if a > alpha_clamp:
                        a = alpha_clamp
                    w = a * t
                    c0 += w * color[j, 0]
                    c1 += w * color[j, 1]
                    c2 += w * color[j, 2]
                    dsum += w * depth[j]
                    t *= 1.0 - a
                gy = y0 + iy
                gx = x0 + ix
                out_color[gy, gx, 0] = c0 + bg[0] * t
                out_color[gy, gx, 1] = c1 + bg[1] * t
                out_color[gy, gx, 2] = c2 + bg[2] * t
                out_alpha[gy, gx] = 1.0 - t
                out_depth_raw[gy, gx] = dsum
                out_t_final[gy, gx] = t
                out_n_contrib[gy, gx] = n


@njit(cache=True, parallel=True)
def composite_image_backward(
    height, width, tile_size, n_tx,
    bounds, mean2d, conic, bbox, opacity, color, depth,
    bg, alpha_clamp, s_cut,
    t_final, n_contrib,
    grad_color_img, grad_alpha_img, grad_depth_img,
    g_mean2d, g_conic, g_opacity, g_color, g_depth,
):
    """Analytic gradients of `composite_image` w.r.t. the per-entry arrays.

    Walks each pixel's contributing prefix back to front, reconstructing the
    running transmittance by division (alpha is clamped away from 1, so the
    divisor stays bounded). Gradient accumulation goes into per-entry slices
    owned exclusively by each tile.
    """
    n_tiles = bounds.shape[0] - 1
    for tile in prange(n_tiles):
        s = bounds[tile]
        e = bounds[tile + 1]
        if s == e:
            continue
        x0 = (tile % n_tx) * tile_size
        y0 = (tile // n_tx) * tile_size
        th = min(tile_size, height - y0)
        tw = min(tile_size, width - x0)
        for iy in range(th):
            gy = y0 + iy
            py = float(gy)
            for ix in range(tw):
                gx = x0 + ix
                px = float(gx)
                n = n_contrib[gy, gx]
                if n == 0:
                    continue
                dc0 = grad_color_img[gy, gx, 0]
                dc1 = grad_color_img[gy, gx, 1]
                dc2 = grad_color_img[gy, gx, 2]
                da = grad_alpha_img[gy, gx]
                dd = grad_depth_img[gy, gx]
                if dc0 == 0.0 and dc1 == 0.0 and dc2 == 0.0 and da == 0.0 and dd == 0.0:
                    continue
                tt = t_final[gy, gx]  # transmittance after the last scanned entry
                r0 = bg[0]
                r1 = bg[1]
                r2 = bg[2]
                rz = 0.0
                q = 1.0
                for j in range(s + n - 1, s - 1, -1):
                    if px < bbox[j, 0] or px > bbox[j, 1] or py < bbox[j, 2] or py > bbox[j, 3]:
                        continue
                    dx = px - mean2d[j, 0]
                    dy = py - mean2d[j, 1]
                    sv = 0.5 * (conic[j, 0] * dx * dx + conic[j, 2] * dy * dy) \
                        + conic[j, 1] * dx * dy
                    if sv > s_cut or sv < 0.0:
                        continue
                    gexp = math.exp(-sv)
                    a = opacity[j] * gexp
                    clamped = a > alpha_clamp
                    if clamped:
                        a = alpha_clamp
                    t_before = tt / (1.0 - a)
                    w = a * t_before
                    g_color[j, 0] += dc0 * w
                    g_color[j, 1] += dc1 * w
                    g_color[j, 2] += dc2 * w
                    g_depth[j] += dd * w
                    ga = t_before * (
                        dc0 * (color[j, 0] - r0)
                        + dc1 * (color[j, 1] - r1)
                        + dc2 * (color[j, 2] - r2)
                        + da * q
                        + dd * (depth[j] - rz)
                    )
                    if not clamped:
                        g_opacity[j] += ga * gexp
                        gs = -ga * opacity[j] * gexp  # dL/ds
                        gx_ = gs * (conic[j, 0] * dx + conic[j, 1] * dy)
                        gy_ = gs * (conic[j, 1] * dx + conic[j, 2] * dy)
                        g_mean2d[j, 0] -= gx_
                        g_mean2d[j, 1] -= gy_
                        g_conic[j, 0] += gs * 0.5 * dx * dx
                        g_conic[j, 1] += gs * dx * dy
                        g_conic[j, 2] += gs * 0.5 * dy * dy
                    r0 = a * color[j, 0] + (1.0 - a) * r0
                    r1 = a * color[j, 1] + (1.0 - a) * r1
                    r2 = a * color[j, 2] + (1.0 - a) * r2
                    rz = a * depth[j] + (1.0 - a) * rz
                    q *= 1.0 - a
                    tt = t_before


@njit(cache=True, parallel=True)
def project_forward(
    centers, scales, quats, w_rot, trans,
    fx, fy, cx, cy, width, height,
    near, lowpass, cutoff, screen_cull,
    keep, p_cam, mean2d, cov2d, conic, radius, bbox,
):
    """Scalar per-splat projection: camera transform, quaternion rotation,
    EWA covariance, conic and bounding radius. Writes are per-splat, so the
    parallel loop is deterministic."""
    n = centers.shape[0]
    for i in prange(n):
        px_ = centers[i, 0]
        py_ = centers[i, 1]
        pz_ = centers[i, 2]
        x = w_rot[0, 0] * px_ + w_rot[0, 1] * py_ + w_rot[0, 2] * pz_ + trans[0]
        y = w_rot[1, 0] * px_ + w_rot[1, 1] * py_ + w_rot[1, 2] * pz_ + trans[1]
        z = w_rot[2, 0] * px_ + w_rot[2, 1] * py_ + w_rot[2, 2] * pz_ + trans[2]
        p_cam[i, 0] = x
        p_cam[i, 1] = y
        p_cam[i, 2] = z
        if z <= near:
            keep[i] = False
            continue

        qw = quats[i, 0]
        qx = quats[i, 1]
        qy = quats[i, 2]
        qz = quats[i, 3]
        qn = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
        qw /= qn
        qx /= qn
        qy /= qn
        qz /= qn
        r00 = 1.0 - 2.0 * (qy * qy + qz * qz)
        r01 = 2.0 * (qx * qy - qw * qz)
        r02 = 2.0 * (qx * qz + qw * qy)
        r10 = 2.0 * (qx * qy + qw * qz)
        r11 = 1.0 - 2.0 * (qx * qx + qz * qz)
        r12 = 2.0 * (qy * qz - qw * qx)
        r20 = 2.0 * (qx * qz - qw * qy)
        r21 = 2.0 * (qy * qz + qw * qx)
        r22 = 1.0 - 2.0 * (qx * qx + qy * qy)
        s0 = scales[i, 0] * scales[i, 0]
        s1 = scales[i, 1] * scales[i, 1]
        s2 = scales[i, 2] * scales[i, 2]
        # cov3d = R diag(s^2) R^T, upper triangle
        xx = r00 * s0 * r00 + r01 * s1 * r01 + r02 * s2 * r02
        xy = r00 * s0 * r10 + r01 * s1 * r11 + r02 * s2 * r12
        xz = r00 * s0 * r20 + r01 * s1 * r21 + r02 * s2 * r22
        yy = r10 * s0 * r10 + r11 * s1 * r11 + r12 * s2 * r12
        yz = r10 * s0 * r20 + r11 * s1 * r21 + r12 * s2 * r22
        zz = r20 * s0 * r20 + r21 * s1 * r21 + r22 * s2 * r22

        inv_z = 1.0 / z
        aj = fx * inv_z
        bj = -fx * x * inv_z * inv_z
        cj = fy * inv_z
        dj = -fy * y * inv_z * inv_z
        m00 = aj * w_rot[0, 0] + bj * w_rot[2, 0]
        m01 = aj * w_rot[0, 1] + bj * w_rot[2, 1]
        m02 = aj * w_rot[0, 2] + bj * w_rot[2, 2]
        m10 = cj * w_rot[1, 0] + dj * w_rot[2, 0]
        m11 = cj * w_rot[1, 1] + dj * w_rot[2, 1]
        m12 = cj * w_rot[1, 2] + dj * w_rot[2, 2]

        t0 = m00 * xx + m01 * xy + m02 * xz
        t1 = m00 * xy + m01 * yy + m02 * yz
        t2 = m00 * xz + m01 * yz + m02 * zz
        u0 = m10 * xx + m11 * xy + m12 * xz
        u1 = m10 * xy + m11 * yy + m12 * yz
        u2 = m10 * xz + m11 * yz + m12 * zz
        va = t0 * m00 + t1 * m01 + t2 * m02 + lowpass
        vb = t0 * m10 + t1 * m11 + t2 * m12
        vc = u0 * m10 + u1 * m11 + u2 * m12 + lowpass
        cov2d[i, 0] = va
        cov2d[i, 1] = vb
        cov2d[i, 2] = vc
        det = va * vc - vb * vb
        conic[i, 0] = vc / det
        conic[i, 1] = -vb / det
        conic[i, 2] = va / det
        mid = 0.5 * (va + vc)
        disc = mid * mid - det
        if disc < 0.0:
            disc = 0.0
        lam = mid + math.sqrt(disc)
        radius[i] = cutoff * math.sqrt(lam)
        # the cutoff ellipse extends exactly cutoff * sqrt(var) along each axis
        rx = cutoff * math.sqrt(va)
        ry = cutoff * math.sqrt(vc)
        mx = fx * x * inv_z + cx
        my = fy * y * inv_z + cy
        mean2d[i, 0] = mx
        mean2d[i, 1] = my
        bbox[i, 0] = mx - rx
        bbox[i, 1] = mx + rx
        bbox[i, 2] = my - ry
        bbox[i, 3] = my + ry
        if screen_cull and (mx + rx < 0.0 or mx - rx > width - 1.0
                            or my + ry < 0.0 or my - ry > height - 1.0):
            keep[i] = False
        else:
            keep[i] = True


@njit(cache=True, parallel=True)
def project_backward_kernel(
    scales, quats, w_rot, p_cam, cov2d,
    fx, fy,
    g_mean, g_conic, g_z_comp,
    g_center, g_scale, g_quat,
):
    """Scalar per-splat chain from pixel-space gradients (mean, conic,
    composited depth) to center / scale / raw quaternion gradients."""
    n = scales.shape[0]
    for i in prange(n):
        x = p_cam[i, 0]
        y = p_cam[i, 1]
        z = p_cam[i, 2]
        inv_z = 1.0 / z
        inv_z2 = inv_z * inv_z

        qw = quats[i, 0]
        qx = quats[i, 1]
        qy = quats[i, 2]
        qz = quats[i, 3]
        qn = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
        uw = qw / qn
        ux = qx / qn
        uy = qy / qn
        uz = qz / qn
        r00 = 1.0 - 2.0 * (uy * uy + uz * uz)
        r01 = 2.0 * (ux * uy - uw * uz)
        r02 = 2.0 * (ux * uz + uw * uy)
        r10 = 2.0 * (ux * uy + uw * uz)
        r11 = 1.0 - 2.0 * (ux * ux + uz * uz)
        r12 = 2.0 * (uy * uz - uw * ux)
        r20 = 2.0 * (ux * uz - uw * uy)
        r21 = 2.0 * (uy * uz + uw * ux)
        r22 = 1.0 - 2.0 * (ux * ux + uy * uy)
        s0 = scales[i, 0]
        s1 = scales[i, 1]
        s2 = scales[i, 2]
        s0q = s0 * s0
        s1q = s1 * s1
        s2q = s2 * s2
        xx = r00 * s0q * r00 + r01 * s1q * r01 + r02 * s2q * r02
        xy = r00 * s0q * r10 + r01 * s1q * r11 + r02 * s2q * r12
        xz = r00 * s0q * r20 + r01 * s1q * r21 + r02 * s2q * r22
        yy = r10 * s0q * r10 + r11 * s1q * r11 + r12 * s2q * r12
        yz = r10 * s0q * r20 + r11 * s1q * r21 + r12 * s2q * r22
        zz = r20 * s0q * r20 + r21 * s1q * r21 + r22 * s2q * r22

        aj = fx * inv_z
        bj = -fx * x * inv_z2
        cj = fy * inv_z
        dj = -fy * y * inv_z2
        m00 = aj * w_rot[0, 0] + bj * w_rot[2, 0]
        m01 = aj * w_rot[0, 1] + bj * w_rot[2, 1]
        m02 = aj * w_rot[0, 2] + bj * w_rot[2, 2]
        m10 = cj * w_rot[1, 0] + dj * w_rot[2, 0]
        m11 = cj * w_rot[1, 1] + dj * w_rot[2, 1]
        m12 = cj * w_rot[1, 2] + dj * w_rot[2, 2]

        # conic -> cov2d
        va = cov2d[i, 0]
        vb = cov2d[i, 1]
        vc = cov2d[i, 2]
        det = va * vc - vb * vb
        ka = vc / det
        kb = -vb / det
        kc = va / det
        ga = g_conic[i, 0]
        gb = 0.5 * g_conic[i, 1]
        gc = g_conic[i, 2]
        t00 = ka * ga + kb * gb
        t01 = ka * gb + kb * gc
        t10 = kb * ga + kc * gb
        t11 = kb * gb + kc * gc
        gcov_a = -(t00 * ka + t01 * kb)
        gcov_b = -(t00 * kb + t01 * kc)  # single off-diagonal entry
        gcov_c = -(t10 * kb + t11 * kc)

        # dL/dM = 2 G M cov3d with G = [[gcov_a, gcov_b], [gcov_b, gcov_c]]
        gm00 = gcov_a * m00 + gcov_b * m10
        gm01 = gcov_a * m01 + gcov_b * m11
        gm02 = gcov_a * m02 + gcov_b * m12
        gm10 = gcov_b * m00 + gcov_c * m10
        gm11 = gcov_b * m01 + gcov_c * m11
        gm12 = gcov_b * m02 + gcov_c * m12
        gM00 = 2.0 * (gm00 * xx + gm01 * xy + gm02 * xz)
        gM01 = 2.0 * (gm00 * xy + gm01 * yy + gm02 * yz)
        gM02 = 2.0 * (gm00 * xz + gm01 * yz + gm02 * zz)
        gM10 = 2.0 * (gm10 * xx + gm11 * xy + gm12 * xz)
        gM11 = 2.0 * (gm10 * xy + gm11 * yy + gm12 * yz)
        gM12 = 2.0 * (gm10 * xz + gm11 * yz + gm12 * zz)

        # dL/dcov3d = M^T G M (full 3x3, symmetric)
        w0 = m00 * gcov_a + m10 * gcov_b
        w1 = m01 * gcov_a + m11 * gcov_b
        w2 = m02 * gcov_a + m12 * gcov_b
        v0 = m00 * gcov_b + m10 * gcov_c
        v1 = m01 * gcov_b + m11 * gcov_c
        v2 = m02 * gcov_b + m12 * gcov_c
        b00 = w0 * m00 + v0 * m10
        b01 = w0 * m01 + v0 * m11
        b02 = w0 * m02 + v0 * m12
        b10 = w1 * m00 + v1 * m10
        b11 = w1 * m01 + v1 * m11
        b12 = w1 * m02 + v1 * m12
        b20 = w2 * m00 + v2 * m10
        b21 = w2 * m01 + v2 * m11
        b22 = w2 * m02 + v2 * m12

        # g_rot = (B + B^T) R diag(s^2); g_scale_k = 2 s_k (R^T B R)_kk
        sy00 = b00 + b00
        sy01 = b01 + b10
        sy02 = b02 + b20
        sy11 = b11 + b11
        sy12 = b12 + b21
        sy22 = b22 + b22
        gr00 = (sy00 * r00 + sy01 * r10 + sy02 * r20) * s0q
        gr01 = (sy00 * r01 + sy01 * r11 + sy02 * r21) * s1q
        gr02 = (sy00 * r02 + sy01 * r12 + sy02 * r22) * s2q
        gr10 = (sy01 * r00 + sy11 * r10 + sy12 * r20) * s0q
        gr11 = (sy01 * r01 + sy11 * r11 + sy12 * r21) * s1q
        gr12 = (sy01 * r02 + sy11 * r12 + sy12 * r22) * s2q
        gr20 = (sy02 * r00 + sy12 * r10 + sy22 * r20) * s0q
        gr21 = (sy02 * r01 + sy12 * r11 + sy22 * r21) * s1q
        gr22 = (sy02 * r02 + sy12 * r12 + sy22 * r22) * s2q

        # (R^T B R) diagonal
        c0 = (r00 * b00 + r10 * b10 + r20 * b20) * r00 \
            + (r00 * b01 + r10 * b11 + r20 * b21) * r10 \
            + (r00 * b02 + r10 * b12 + r20 * b22) * r20
        c1 = (r01 * b00 + r11 * b10 + r21 * b20) * r01 \
            + (r01 * b01 + r11 * b11 + r21 * b21) * r11 \
            + (r01 * b02 + r11 * b12 + r21 * b22) * r21
        c2 = (r02 * b00 + r12 * b10 + r22 * b20) * r02 \
            + (r02 * b01 + r12 * b11 + r22 * b21) * r12 \
            + (r02 * b02 + r12 * b12 + r22 * b22) * r22
        g_scale[i, 0] = 2.0 * s0 * c0
        g_scale[i, 1] = 2.0 * s1 * c1
        g_scale[i, 2] = 2.0 * s2 * c2

        # quaternion chain: dL/du_k = sum_ij gR_ij dR_ij/du_k, then normalize
        guw = 2.0 * (gr01 * -uz + gr02 * uy + gr10 * uz + gr12 * -ux
                     + gr20 * -uy + gr21 * ux)
        gux = 2.0 * (gr01 * uy + gr02 * uz + gr10 * uy + gr11 * -2.0 * ux
                     + gr12 * -uw + gr20 * uz + gr21 * uw + gr22 * -2.0 * ux)
        guy = 2.0 * (gr00 * -2.0 * uy + gr01 * ux + gr02 * uw + gr10 * ux
                     + gr12 * uz + gr20 * -uw + gr21 * uz + gr22 * -2.0 * uy)
        guz = 2.0 * (gr00 * -2.0 * uz + gr01 * -uw + gr02 * ux + gr10 * uw
                     + gr11 * -2.0 * uz + gr12 * uy + gr20 * ux + gr21 * uy)
        dot = uw * guw + ux * gux + uy * guy + uz * guz
        g_quat[i, 0] = (guw - uw * dot) / qn
        g_quat[i, 1] = (gux - ux * dot) / qn
        g_quat[i, 2] = (guy - uy * dot) / qn
        g_quat[i, 3] = (guz - uz * dot) / qn

        # M = J W -> J entries depend on (x, y, z)
        gj00 = gM00 * w_rot[0, 0] + gM01 * w_rot[0, 1] + gM02 * w_rot[0, 2]
        gj02 = gM00 * w_rot[2, 0] + gM01 * w_rot[2, 1] + gM02 * w_rot[2, 2]
        gj11 = gM10 * w_rot[1, 0] + gM11 * w_rot[1, 1] + gM12 * w_rot[1, 2]
        gj12 = gM10 * w_rot[2, 0] + gM11 * w_rot[2, 1] + gM12 * w_rot[2, 2]
        gpx = gj02 * (-fx * inv_z2)
        gpy = gj12 * (-fy * inv_z2)
        gpz = (gj00 * (-fx * inv_z2) + gj02 * (2.0 * fx * x * inv_z2 * inv_z)
               + gj11 * (-fy * inv_z2) + gj12 * (2.0 * fy * y * inv_z2 * inv_z))

        gpx += g_mean[i, 0] * fx * inv_z
        gpy += g_mean[i, 1] * fy * inv_z
        gpz += -(g_mean[i, 0] * fx * x + g_mean[i, 1] * fy * y) * inv_z2
        gpz += g_z_comp[i]

        g_center[i, 0] = gpx * w_rot[0, 0] + gpy * w_rot[1, 0] + gpz * w_rot[2, 0]
        g_center[i, 1] = gpx * w_rot[0, 1] + gpy * w_rot[1, 1] + gpz * w_rot[2, 1]
        g_center[i, 2] = gpx * w_rot[0, 2] + gpy * w_rot[1, 2] + gpz * w_rot[2, 2]
