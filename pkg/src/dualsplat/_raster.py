"""Numba kernels for tile-binned alpha blending and its adjoint.

A Gaussian touches a pixel iff the pixel center lies inside its 3-sigma
ellipse (``q = d^T conic d <= 9``).  Binning uses the exact axis-aligned
bounds of that ellipse, so tiling never changes which pairs interact.
"""
import math

import numpy as np
from numba import njit, prange

SUPPORT_Q = 9.0


@njit(cache=True)
def bin_tiles(order, px0, px1, py0, py1, tile, tiles_x, n_tiles):
    """CSR lists of Gaussians per tile, each list in ``order`` (depth) order."""
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for g in order:
        for ty in range(py0[g] // tile, py1[g] // tile + 1):
            for tx in range(px0[g] // tile, px1[g] // tile + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], dtype=np.int64)
    for g in order:
        for ty in range(py0[g] // tile, py1[g] // tile + 1):
            for tx in range(px0[g] // tile, px1[g] // tile + 1):
                t = ty * tiles_x + tx
                ids[fill[t]] = g
                fill[t] += 1
    return offsets, ids


@njit(parallel=True, cache=True)
def forward(offsets, ids, mean2d, conic, opac, feat, bg, height, width, tile, tiles_x,
            alpha_max, t_min):
    n_tiles = len(offsets) - 1
    n_ch = feat.shape[1]
    out = np.zeros((height, width, n_ch))
    final_t = np.ones((height, width))
    n_last = np.zeros((height, width), dtype=np.int64)
    for t in prange(n_tiles):
        y0 = (t // tiles_x) * tile
        x0 = (t % tiles_x) * tile
        start = offsets[t]
        end = offsets[t + 1]
        for i in range(y0, min(y0 + tile, height)):
            py = i + 0.5
            for j in range(x0, min(x0 + tile, width)):
                px = j + 0.5
                trans = 1.0
                last = start
                for k in range(start, end):
                    g = ids[k]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                    if q > SUPPORT_Q:
                        continue
                    alpha = opac[g] * math.exp(-0.5 * q)
                    if alpha > alpha_max:
                        alpha = alpha_max
                    w = alpha * trans
                    for c in range(n_ch):
                        out[i, j, c] += w * feat[g, c]
                    trans *= 1.0 - alpha
                    last = k + 1
                    if trans < t_min:
                        break
                for c in range(n_ch):
                    out[i, j, c] += trans * bg[c]
                final_t[i, j] = trans
                n_last[i, j] = last
    return out, final_t, n_last


@njit(parallel=True, cache=True)
def backward(offsets, ids, mean2d, conic, opac, feat, bg, n_last, grad_out, height, width,
             tile, tiles_x, alpha_max, n_chunks):
    """Per-Gaussian gradients, one buffer per chunk of tiles.

    Buffer columns: d mean_x, d mean_y, d conic_a, d conic_b, d conic_c,
    d opacity (activated), then one column per feature channel.
    """
    n_tiles = len(offsets) - 1
    n_ch = feat.shape[1]
    n_g = mean2d.shape[0]
    buf = np.zeros((n_chunks, n_g, 6 + n_ch))
    max_len = 0
    for t in range(n_tiles):
        max_len = max(max_len, offsets[t + 1] - offsets[t])
    for ch in prange(n_chunks):
        s_id = np.empty(max_len, dtype=np.int64)
        s_alpha = np.empty(max_len)
        s_trans = np.empty(max_len)
        s_gauss = np.empty(max_len)
        s_dx = np.empty(max_len)
        s_dy = np.empty(max_len)
        behind = np.empty(n_ch)
        t_begin = ch * n_tiles // n_chunks
        t_end = (ch + 1) * n_tiles // n_chunks
        for t in range(t_begin, t_end):
            y0 = (t // tiles_x) * tile
            x0 = (t % tiles_x) * tile
            start = offsets[t]
            for i in range(y0, min(y0 + tile, height)):
                py = i + 0.5
                for j in range(x0, min(x0 + tile, width)):
                    px = j + 0.5
                    # replay the forward pass for this pixel
                    cnt = 0
                    trans = 1.0
                    for k in range(start, n_last[i, j]):
                        g = ids[k]
                        dx = px - mean2d[g, 0]
                        dy = py - mean2d[g, 1]
                        q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                        if q > SUPPORT_Q:
                            continue
                        gv = math.exp(-0.5 * q)
                        alpha = opac[g] * gv
                        if alpha > alpha_max:
                            alpha = alpha_max
                        s_id[cnt] = g
                        s_alpha[cnt] = alpha
                        s_trans[cnt] = trans
                        s_gauss[cnt] = gv
                        s_dx[cnt] = dx
                        s_dy[cnt] = dy
                        cnt += 1
                        trans *= 1.0 - alpha
                    for c in range(n_ch):
                        behind[c] = bg[c]
                    for m in range(cnt - 1, -1, -1):
                        g = s_id[m]
                        alpha = s_alpha[m]
                        tb = s_trans[m]
                        w = alpha * tb
                        d_alpha = 0.0
                        for c in range(n_ch):
                            go = grad_out[i, j, c]
                            buf[ch, g, 6 + c] += w * go
                            d_alpha += go * (feat[g, c] - behind[c])
                            behind[c] = alpha * feat[g, c] + (1.0 - alpha) * behind[c]
                        d_alpha *= tb
                        gv = s_gauss[m]
                        if opac[g] * gv > alpha_max:
                            continue
                        buf[ch, g, 5] += d_alpha * gv
                        d_power = d_alpha * opac[g] * gv
                        dx = s_dx[m]
                        dy = s_dy[m]
                        buf[ch, g, 0] += d_power * (conic[g, 0] * dx + conic[g, 1] * dy)
                        buf[ch, g, 1] += d_power * (conic[g, 1] * dx + conic[g, 2] * dy)
                        buf[ch, g, 2] += -0.5 * d_power * dx * dx
                        buf[ch, g, 3] += -d_power * dx * dy
                        buf[ch, g, 4] += -0.5 * d_power * dy * dy
    return buf


@njit(cache=True)
def _walk_pixel(i, j, offsets, ids, mean2d, conic, opac, n_last, tile, tiles_x, alpha_max,
                gid, alphas, trans_before, pos, write):
    t = (i // tile) * tiles_x + j // tile
    trans = 1.0
    n = 0
    for k in range(offsets[t], n_last[i, j]):
        g = ids[k]
        dx = j + 0.5 - mean2d[g, 0]
        dy = i + 0.5 - mean2d[g, 1]
        q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
        if q > SUPPORT_Q:
            continue
        alpha = min(opac[g] * math.exp(-0.5 * q), alpha_max)
        if write:
            gid[pos + n] = g
            alphas[pos + n] = alpha
            trans_before[pos + n] = trans
        n += 1
        trans *= 1.0 - alpha
    return n


@njit(cache=True)
def record(offsets, ids, mean2d, conic, opac, n_last, height, width, tile, tiles_x, alpha_max):
    """Per-pixel contribution lists as CSR: (gaussian, alpha, T before)."""
    counts = np.zeros(height * width + 1, dtype=np.int64)
    gid = np.empty(0, dtype=np.int64)
    alphas = np.empty(0)
    trans_before = np.empty(0)
    for i in range(height):
        for j in range(width):
            counts[i * width + j + 1] = _walk_pixel(
                i, j, offsets, ids, mean2d, conic, opac, n_last, tile, tiles_x, alpha_max,
                gid, alphas, trans_before, 0, False)
    offs = np.cumsum(counts)
    gid = np.empty(offs[-1], dtype=np.int64)
    alphas = np.empty(offs[-1])
    trans_before = np.empty(offs[-1])
    for i in range(height):
        for j in range(width):
            _walk_pixel(i, j, offsets, ids, mean2d, conic, opac, n_last, tile, tiles_x, alpha_max,
                        gid, alphas, trans_before, offs[i * width + j], True)
    return offs, gid, alphas, trans_before


@njit(cache=True)
def preprocess(pos, log_scales, quats, w2c, fx, fy, cx, cy, width, height, near, dilation):
    """Project every Gaussian; returns screen-space data and pixel bounds.

    ``valid`` is False for points at or behind the near plane and for
    ellipses whose 3-sigma box holds no pixel center.
    """
    n = pos.shape[0]
    mean2d = np.zeros((n, 2))
    cov2d = np.zeros((n, 3))
    conic = np.zeros((n, 3))
    depth = np.zeros(n)
    bounds = np.zeros((n, 4), dtype=np.int64)
    valid = np.zeros(n, dtype=np.bool_)
    rot = np.empty((n, 3, 3))
    jac = np.zeros((n, 2, 3))
    cam_pts = np.empty((n, 3))
    t = np.empty((2, 3))
    for g in range(n):
        qn = math.sqrt(quats[g, 0] ** 2 + quats[g, 1] ** 2 + quats[g, 2] ** 2 + quats[g, 3] ** 2)
        w = quats[g, 0] / qn
        x = quats[g, 1] / qn
        y = quats[g, 2] / qn
        z = quats[g, 3] / qn
        r = rot[g]
        r[0, 0] = 1 - 2 * (y * y + z * z)
        r[0, 1] = 2 * (x * y - w * z)
        r[0, 2] = 2 * (x * z + w * y)
        r[1, 0] = 2 * (x * y + w * z)
        r[1, 1] = 1 - 2 * (x * x + z * z)
        r[1, 2] = 2 * (y * z - w * x)
        r[2, 0] = 2 * (x * z - w * y)
        r[2, 1] = 2 * (y * z + w * x)
        r[2, 2] = 1 - 2 * (x * x + y * y)
        for a in range(3):
            cam_pts[g, a] = (w2c[a, 0] * pos[g, 0] + w2c[a, 1] * pos[g, 1] + w2c[a, 2] * pos[g, 2]
                             + w2c[a, 3])
        px, py, pz = cam_pts[g, 0], cam_pts[g, 1], cam_pts[g, 2]
        depth[g] = pz
        if not pz > near:
            continue
        iz = 1.0 / pz
        mx = fx * px * iz + cx
        my = fy * py * iz + cy
        jac[g, 0, 0] = fx * iz
        jac[g, 0, 2] = -fx * px * iz * iz
        jac[g, 1, 1] = fy * iz
        jac[g, 1, 2] = -fy * py * iz * iz
        # T = J W R S, cov2d = T T^T
        for i in range(2):
            for k in range(3):
                acc = 0.0
                for a in range(3):
                    jw = jac[g, i, 0] * w2c[0, a] + jac[g, i, 1] * w2c[1, a] + jac[g, i, 2] * w2c[2, a]
                    acc += jw * r[a, k]
                t[i, k] = acc * math.exp(log_scales[g, k])
        ca = t[0, 0] * t[0, 0] + t[0, 1] * t[0, 1] + t[0, 2] * t[0, 2] + dilation
        cb = t[0, 0] * t[1, 0] + t[0, 1] * t[1, 1] + t[0, 2] * t[1, 2]
        cc = t[1, 0] * t[1, 0] + t[1, 1] * t[1, 1] + t[1, 2] * t[1, 2] + dilation
        det = ca * cc - cb * cb
        ex = 3.0 * math.sqrt(ca)
        ey = 3.0 * math.sqrt(cc)
        x0 = math.ceil(mx - ex - 0.5)
        x1 = math.floor(mx + ex - 0.5)
        y0 = math.ceil(my - ey - 0.5)
        y1 = math.floor(my + ey - 0.5)
        mean2d[g, 0] = mx
        mean2d[g, 1] = my
        cov2d[g, 0] = ca
        cov2d[g, 1] = cb
        cov2d[g, 2] = cc
        conic[g, 0] = cc / det
        conic[g, 1] = -cb / det
        conic[g, 2] = ca / det
        if x1 < 0 or y1 < 0 or x0 > width - 1 or y0 > height - 1 or not det > 0.0:
            continue
        valid[g] = True
        bounds[g, 0] = max(x0, 0)
        bounds[g, 1] = min(x1, width - 1)
        bounds[g, 2] = max(y0, 0)
        bounds[g, 3] = min(y1, height - 1)
    return mean2d, cov2d, conic, depth, bounds, valid, rot, jac, cam_pts


@njit(cache=True)
def chain_backward(acc, valid, cov2d, jac, cam_pts, rot, log_scales, quats, w2c, fx, fy):
    """Pull screen-space gradients back to positions, log-scales and quaternions."""
    n = acc.shape[0]
    g_pos = np.zeros((n, 3))
    g_ls = np.zeros((n, 3))
    g_q = np.zeros((n, 4))
    wr = w2c[:3, :3]
    gcov = np.empty((2, 2))
    s = np.empty(3)
    m = np.empty((2, 3))
    m3 = np.empty((3, 3))
    sigma = np.empty((3, 3))
    gm = np.empty((2, 3))
    g_sigma = np.empty((3, 3))
    g_m = np.empty((2, 3))
    g_jac = np.empty((2, 3))
    g_m3 = np.empty((3, 3))
    gr = np.empty((3, 3))
    for g in range(n):
        if not valid[g]:
            continue
        A = cov2d[g, 0]
        B = cov2d[g, 1]
        C = cov2d[g, 2]
        ga = acc[g, 2]
        gb = acc[g, 3]
        gc = acc[g, 4]
        det = A * C - B * B
        inv_d2 = 1.0 / (det * det)
        gA = (-C * C * ga + B * C * gb - B * B * gc) * inv_d2
        gC = (-B * B * ga + A * B * gb - A * A * gc) * inv_d2
        gB = (2.0 * B * C * ga - (det + 2.0 * B * B) * gb + 2.0 * A * B * gc) * inv_d2
        gcov[0, 0] = gA
        gcov[1, 1] = gC
        gcov[0, 1] = 0.5 * gB
        gcov[1, 0] = 0.5 * gB
        for k in range(3):
            s[k] = math.exp(log_scales[g, k])
        for i in range(2):
            for a in range(3):
                m[i, a] = jac[g, i, 0] * wr[0, a] + jac[g, i, 1] * wr[1, a] + jac[g, i, 2] * wr[2, a]
        for i in range(3):
            for k in range(3):
                m3[i, k] = rot[g, i, k] * s[k]
        for i in range(3):
            for k in range(3):
                sigma[i, k] = m3[i, 0] * m3[k, 0] + m3[i, 1] * m3[k, 1] + m3[i, 2] * m3[k, 2]
        for i in range(2):
            for a in range(3):
                gm[i, a] = gcov[i, 0] * m[0, a] + gcov[i, 1] * m[1, a]
        for a in range(3):
            for b in range(3):
                g_sigma[a, b] = m[0, a] * gm[0, b] + m[1, a] * gm[1, b]
        for i in range(2):
            for b in range(3):
                g_m[i, b] = 2.0 * (gm[i, 0] * sigma[0, b] + gm[i, 1] * sigma[1, b] + gm[i, 2] * sigma[2, b])
        for i in range(2):
            for c in range(3):
                g_jac[i, c] = g_m[i, 0] * wr[c, 0] + g_m[i, 1] * wr[c, 1] + g_m[i, 2] * wr[c, 2]
        x, y, z = cam_pts[g, 0], cam_pts[g, 1], cam_pts[g, 2]
        iz = 1.0 / z
        iz2 = iz * iz
        iz3 = iz2 * iz
        dmx = acc[g, 0]
        dmy = acc[g, 1]
        gp0 = dmx * fx * iz - g_jac[0, 2] * fx * iz2
        gp1 = dmy * fy * iz - g_jac[1, 2] * fy * iz2
        gp2 = (-dmx * fx * x * iz2 - dmy * fy * y * iz2
               - g_jac[0, 0] * fx * iz2 + g_jac[0, 2] * 2.0 * fx * x * iz3
               - g_jac[1, 1] * fy * iz2 + g_jac[1, 2] * 2.0 * fy * y * iz3)
        for a in range(3):
            g_pos[g, a] = wr[0, a] * gp0 + wr[1, a] * gp1 + wr[2, a] * gp2
        for i in range(3):
            for k in range(3):
                g_m3[i, k] = 2.0 * (g_sigma[i, 0] * m3[0, k] + g_sigma[i, 1] * m3[1, k]
                                    + g_sigma[i, 2] * m3[2, k])
        for k in range(3):
            acc_s = 0.0
            for i in range(3):
                acc_s += rot[g, i, k] * g_m3[i, k]
                gr[i, k] = g_m3[i, k] * s[k]
            g_ls[g, k] = acc_s * s[k]
        qn = math.sqrt(quats[g, 0] ** 2 + quats[g, 1] ** 2 + quats[g, 2] ** 2 + quats[g, 3] ** 2)
        w = quats[g, 0] / qn
        x = quats[g, 1] / qn
        y = quats[g, 2] / qn
        z = quats[g, 3] / qn
        gw = 2 * (-z * gr[0, 1] + y * gr[0, 2] + z * gr[1, 0] - x * gr[1, 2] - y * gr[2, 0] + x * gr[2, 1])
        gx = 2 * (y * gr[0, 1] + z * gr[0, 2] + y * gr[1, 0] - 2 * x * gr[1, 1] - w * gr[1, 2]
                  + z * gr[2, 0] + w * gr[2, 1] - 2 * x * gr[2, 2])
        gy = 2 * (-2 * y * gr[0, 0] + x * gr[0, 1] + w * gr[0, 2] + x * gr[1, 0] + z * gr[1, 2]
                  - w * gr[2, 0] + z * gr[2, 1] - 2 * y * gr[2, 2])
        gz = 2 * (-2 * z * gr[0, 0] - w * gr[0, 1] + x * gr[0, 2] + w * gr[1, 0] - 2 * z * gr[1, 1]
                  + y * gr[1, 2] + x * gr[2, 0] + y * gr[2, 1])
        dot = w * gw + x * gx + y * gy + z * gz
        g_q[g, 0] = (gw - w * dot) / qn
        g_q[g, 1] = (gx - x * dot) / qn
        g_q[g, 2] = (gy - y * dot) / qn
        g_q[g, 3] = (gz - z * dot) / qn
    return g_pos, g_ls, g_q
