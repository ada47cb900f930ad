# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled compositing kernels: per-pixel front-to-back alpha blending and
its reverse-mode adjoint. Semantics mirror the numpy fallback exactly."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

BACKEND_NAME = "cython"


def forward(cnp.int64_t[::1] tile_offsets, cnp.int32_t[::1] tile_splats,
            int tiles_x, int tiles_y, int tile,
            cnp.float64_t[:, ::1] mean2d, cnp.float64_t[:, ::1] conic,
            cnp.float64_t[:, ::1] color, cnp.float64_t[::1] opacity,
            cnp.float64_t[::1] depth, int H, int W,
            cnp.float64_t[::1] background, double t_min, double alpha_clamp):
    color_img = np.zeros((H, W, 3))
    depth_img = np.zeros((H, W))
    alpha_img = np.zeros((H, W))
    final_t = np.ones((H, W))
    n_contrib = np.zeros((H, W), dtype=np.int32)
    cdef cnp.float64_t[:, :, ::1] cimg = color_img
    cdef cnp.float64_t[:, ::1] dimg = depth_img
    cdef cnp.float64_t[:, ::1] aimg = alpha_img
    cdef cnp.float64_t[:, ::1] ft = final_t
    cdef cnp.int32_t[:, ::1] nco = n_contrib

    cdef int ty, tx, tid, px, py, y0, y1, x0, x1
    cdef Py_ssize_t k, lo, hi, s
    cdef double T, q, a, w, dx, dy, C0, C1, C2, D, Aacc
    cdef int count

    for ty in range(tiles_y):
        y0 = ty * tile
        y1 = min((ty + 1) * tile, H)
        for tx in range(tiles_x):
            tid = ty * tiles_x + tx
            lo = tile_offsets[tid]
            hi = tile_offsets[tid + 1]
            x0 = tx * tile
            x1 = min((tx + 1) * tile, W)
            for py in range(y0, y1):
                for px in range(x0, x1):
                    T = 1.0
                    C0 = 0.0
                    C1 = 0.0
                    C2 = 0.0
                    D = 0.0
                    Aacc = 0.0
                    count = 0
                    for k in range(lo, hi):
                        if T < t_min:
                            break
                        s = tile_splats[k]
                        dx = px - mean2d[s, 0]
                        dy = py - mean2d[s, 1]
                        q = (conic[s, 0] * dx * dx
                             + 2.0 * conic[s, 1] * dx * dy
                             + conic[s, 2] * dy * dy)
                        a = opacity[s] * exp(-0.5 * q)
                        if a > alpha_clamp:
                            a = alpha_clamp
                        w = a * T
                        C0 += w * color[s, 0]
                        C1 += w * color[s, 1]
                        C2 += w * color[s, 2]
                        D += w * depth[s]
                        Aacc += w
                        T *= 1.0 - a
                        count = <int>(k - lo + 1)
                    cimg[py, px, 0] = C0 + T * background[0]
                    cimg[py, px, 1] = C1 + T * background[1]
                    cimg[py, px, 2] = C2 + T * background[2]
                    dimg[py, px] = D / max(Aacc, 1e-6)
                    aimg[py, px] = Aacc
                    ft[py, px] = T
                    nco[py, px] = count
    return color_img, depth_img, alpha_img, final_t, n_contrib


def backward(cnp.int64_t[::1] tile_offsets, cnp.int32_t[::1] tile_splats,
             int tiles_x, int tiles_y, int tile,
             cnp.float64_t[:, ::1] mean2d, cnp.float64_t[:, ::1] conic,
             cnp.float64_t[:, ::1] color, cnp.float64_t[::1] opacity,
             cnp.float64_t[::1] depth, int H, int W,
             cnp.float64_t[::1] background,
             cnp.float64_t[:, ::1] final_t, cnp.int32_t[:, ::1] n_contrib,
             cnp.float64_t[:, ::1] alpha_img, cnp.float64_t[:, ::1] depth_img,
             cnp.float64_t[:, :, ::1] dl_dcolor, cnp.float64_t[:, ::1] dl_ddepth,
             double t_min, double alpha_clamp):
    cdef Py_ssize_t m = mean2d.shape[0]
    g_mean2d = np.zeros((m, 2))
    g_conic = np.zeros((m, 3))
    g_color = np.zeros((m, 3))
    g_opacity = np.zeros(m)
    g_z = np.zeros(m)
    cdef cnp.float64_t[:, ::1] gm = g_mean2d
    cdef cnp.float64_t[:, ::1] gq = g_conic
    cdef cnp.float64_t[:, ::1] gc = g_color
    cdef cnp.float64_t[::1] go = g_opacity
    cdef cnp.float64_t[::1] gz = g_z

    cdef int ty, tx, tid, px, py, y0, y1, x0, x1, nc
    cdef Py_ssize_t k, lo, hi, s
    cdef double T_run, T_k, T_fin, q, g, raw, a, one_m, w
    cdef double dx, dy, da, dg, dqv, denom, dnum, dacc, bg_dot
    cdef double acc_c0, acc_c1, acc_c2, acc_z, acc_a
    cdef double dc0, dc1, dc2

    for ty in range(tiles_y):
        y0 = ty * tile
        y1 = min((ty + 1) * tile, H)
        for tx in range(tiles_x):
            tid = ty * tiles_x + tx
            lo = tile_offsets[tid]
            hi = tile_offsets[tid + 1]
            if hi == lo:
                continue
            x0 = tx * tile
            x1 = min((tx + 1) * tile, W)
            for py in range(y0, y1):
                for px in range(x0, x1):
                    nc = n_contrib[py, px]
                    if nc == 0:
                        continue
                    dc0 = dl_dcolor[py, px, 0]
                    dc1 = dl_dcolor[py, px, 1]
                    dc2 = dl_dcolor[py, px, 2]
                    denom = max(alpha_img[py, px], 1e-6)
                    dnum = dl_ddepth[py, px] / denom
                    if alpha_img[py, px] > 1e-6:
                        dacc = -dl_ddepth[py, px] * depth_img[py, px] / denom
                    else:
                        dacc = 0.0
                    bg_dot = (dc0 * background[0] + dc1 * background[1]
                              + dc2 * background[2])
                    T_fin = final_t[py, px]
                    T_run = T_fin
                    acc_c0 = 0.0
                    acc_c1 = 0.0
                    acc_c2 = 0.0
                    acc_z = 0.0
                    acc_a = 0.0
                    for k in range(lo + nc - 1, lo - 1, -1):
                        s = tile_splats[k]
                        dx = px - mean2d[s, 0]
                        dy = py - mean2d[s, 1]
                        q = (conic[s, 0] * dx * dx
                             + 2.0 * conic[s, 1] * dx * dy
                             + conic[s, 2] * dy * dy)
                        g = exp(-0.5 * q)
                        raw = opacity[s] * g
                        a = raw
                        if a > alpha_clamp:
                            a = alpha_clamp
                        one_m = 1.0 - a
                        T_k = T_run / one_m
                        w = a * T_k
                        gc[s, 0] += w * dc0
                        gc[s, 1] += w * dc1
                        gc[s, 2] += w * dc2
                        gz[s] += w * dnum
                        da = ((dc0 * (color[s, 0] - acc_c0)
                               + dc1 * (color[s, 1] - acc_c1)
                               + dc2 * (color[s, 2] - acc_c2)) * T_k
                              - bg_dot * T_fin / one_m
                              + dnum * (depth[s] - acc_z) * T_k
                              + dacc * (1.0 - acc_a) * T_k)
                        if raw < alpha_clamp:
                            dg = da * opacity[s]
                            go[s] += da * g
                            dqv = dg * (-0.5) * g
                            gm[s, 0] += dqv * (-2.0) * (conic[s, 0] * dx + conic[s, 1] * dy)
                            gm[s, 1] += dqv * (-2.0) * (conic[s, 1] * dx + conic[s, 2] * dy)
                            gq[s, 0] += dqv * dx * dx
                            gq[s, 1] += dqv * 2.0 * dx * dy
                            gq[s, 2] += dqv * dy * dy
                        acc_c0 = a * color[s, 0] + one_m * acc_c0
                        acc_c1 = a * color[s, 1] + one_m * acc_c1
                        acc_c2 = a * color[s, 2] + one_m * acc_c2
                        acc_z = a * depth[s] + one_m * acc_z
                        acc_a = a + one_m * acc_a
                        T_run = T_k
    return g_mean2d, g_conic, g_color, g_opacity, g_z
