"""Pure-numpy compositing kernels: the fallback backend.

Semantics match the compiled kernels exactly: per tile, splats composite
front-to-back per pixel, a pixel stops accumulating once its transmittance
falls below ``t_min``, and the backward pass re-walks the processed prefix in
reverse. Vectorization is over the pixels of one tile.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "numpy"


def forward(tile_offsets, tile_splats, tiles_x, tiles_y, tile,
            mean2d, conic, color, opacity, depth, H, W, background,
            t_min, alpha_clamp):
    color_img = np.zeros((H, W, 3))
    depth_img = np.zeros((H, W))
    alpha_img = np.zeros((H, W))
    final_t = np.ones((H, W))
    n_contrib = np.zeros((H, W), dtype=np.int32)

    for ty in range(tiles_y):
        y0, y1 = ty * tile, min((ty + 1) * tile, H)
        for tx in range(tiles_x):
            tid = ty * tiles_x + tx
            lo, hi = tile_offsets[tid], tile_offsets[tid + 1]
            if hi == lo:
                continue
            x0, x1 = tx * tile, min((tx + 1) * tile, W)
            ys, xs = np.mgrid[y0:y1, x0:x1]
            ys = ys.ravel()
            xs = xs.ravel()
            T = np.ones(ys.size)
            C = np.zeros((ys.size, 3))
            D = np.zeros(ys.size)
            Aacc = np.zeros(ys.size)
            nc = np.zeros(ys.size, dtype=np.int32)
            for k in range(lo, hi):
                s = tile_splats[k]
                live = T >= t_min
                if not live.any():
                    break
                dx = xs - mean2d[s, 0]
                dy = ys - mean2d[s, 1]
                q = conic[s, 0] * dx * dx + 2.0 * conic[s, 1] * dx * dy + conic[s, 2] * dy * dy
                a = np.minimum(alpha_clamp, opacity[s] * np.exp(-0.5 * q))
                w = a * T
                C[live] += w[live, None] * color[s]
                D[live] += w[live] * depth[s]
                Aacc[live] += w[live]
                T[live] = T[live] * (1.0 - a[live])
                nc[live] = k - lo + 1
            color_img[ys, xs] = C + T[:, None] * background[None, :]
            depth_img[ys, xs] = D / np.maximum(Aacc, 1e-6)
            alpha_img[ys, xs] = Aacc
            final_t[ys, xs] = T
            n_contrib[ys, xs] = nc
    # tiles with no splats still show the background
    untouched = n_contrib == 0
    color_img[untouched] = background
    return color_img, depth_img, alpha_img, final_t, n_contrib


def backward(tile_offsets, tile_splats, tiles_x, tiles_y, tile,
             mean2d, conic, color, opacity, depth, H, W, background,
             final_t, n_contrib, alpha_img, depth_img,
             dl_dcolor, dl_ddepth, t_min, alpha_clamp):
    m = mean2d.shape[0]
    g_mean2d = np.zeros((m, 2))
    g_conic = np.zeros((m, 3))
    g_color = np.zeros((m, 3))
    g_opacity = np.zeros(m)
    g_z = np.zeros(m)

    denom = np.maximum(alpha_img, 1e-6)
    dl_dnum = dl_ddepth / denom
    dl_dacc = np.where(alpha_img > 1e-6,
                       -dl_ddepth * depth_img / denom, 0.0)

    for ty in range(tiles_y):
        y0, y1 = ty * tile, min((ty + 1) * tile, H)
        for tx in range(tiles_x):
            tid = ty * tiles_x + tx
            lo, hi = tile_offsets[tid], tile_offsets[tid + 1]
            if hi == lo:
                continue
            x0, x1 = tx * tile, min((tx + 1) * tile, W)
            ys, xs = np.mgrid[y0:y1, x0:x1]
            ys = ys.ravel()
            xs = xs.ravel()
            nP = ys.size
            nc = n_contrib[ys, xs]
            if not (nc > 0).any():
                continue
            dC = dl_dcolor[ys, xs]  # (P, 3)
            dNum = dl_dnum[ys, xs]
            dAcc = dl_dacc[ys, xs]
            bg_dot = dC @ background  # (P,)
            T_run = final_t[ys, xs].copy()
            acc_c = np.zeros((nP, 3))
            acc_z = np.zeros(nP)
            acc_a = np.zeros(nP)
            for k in range(hi - lo - 1, -1, -1):
                s = tile_splats[lo + k]
                act = k < nc
                if not act.any():
                    continue
                dx = xs - mean2d[s, 0]
                dy = ys - mean2d[s, 1]
                q = conic[s, 0] * dx * dx + 2.0 * conic[s, 1] * dx * dy + conic[s, 2] * dy * dy
                g = np.exp(-0.5 * q)
                raw = opacity[s] * g
                a = np.minimum(alpha_clamp, raw)
                one_m = 1.0 - a
                T_k = np.where(act, T_run / one_m, 0.0)
                w = a * T_k
                g_color[s] += (w[act, None] * dC[act]).sum(axis=0)
                g_z[s] += (w * dNum)[act].sum()
                da = (
                    (dC * (color[s][None, :] - acc_c)).sum(axis=1) * T_k
                    - bg_dot * final_t[ys, xs] / one_m
                    + dNum * (depth[s] - acc_z) * T_k
                    + dAcc * (1.0 - acc_a) * T_k
                )
                open_clamp = act & (raw < alpha_clamp)
                dg = np.where(open_clamp, da * opacity[s], 0.0)
                g_opacity[s] += np.where(open_clamp, da * g, 0.0).sum()
                dq = dg * (-0.5) * g
                g_mean2d[s, 0] += (dq * (-2.0) * (conic[s, 0] * dx + conic[s, 1] * dy)).sum()
                g_mean2d[s, 1] += (dq * (-2.0) * (conic[s, 1] * dx + conic[s, 2] * dy)).sum()
                g_conic[s, 0] += (dq * dx * dx).sum()
                g_conic[s, 1] += (dq * 2.0 * dx * dy).sum()
                g_conic[s, 2] += (dq * dy * dy).sum()
                # step the reconstruction for active pixels
                acc_c[act] = a[act, None] * color[s][None, :] + one_m[act, None] * acc_c[act]
                acc_z[act] = a[act] * depth[s] + one_m[act] * acc_z[act]
                acc_a[act] = a[act] + one_m[act] * acc_a[act]
                T_run[act] = T_k[act]
    return g_mean2d, g_conic, g_color, g_opacity, g_z
