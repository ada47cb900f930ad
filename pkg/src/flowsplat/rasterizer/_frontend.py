"""Projection frontend and parameter-gradient chain shared by both kernel
backends.

The per-pixel compositing loops live in the selected kernel module; everything
here is vectorized numpy: EWA projection of 3D gaussians to 2D splats, culling,
canonical depth ordering, tile binning, and the pullback of splat-space
gradients onto gaussian parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import EPS_Z, Intrinsics, Pose

EPS_AA = 0.3  # px^2 anti-aliasing covariance floor
ALPHA_CLAMP = 0.99
T_MIN = 1e-4
TILE = 16


@dataclass
class Splat2D:
    """Visible splats in canonical (front-to-back, index tie-break) order."""

    mean2d: np.ndarray  # (M, 2)
    cov2d: np.ndarray  # (M, 3) packed (a, b, c) of [[a, b], [b, c]]
    conic: np.ndarray  # (M, 3) packed inverse
    depth: np.ndarray  # (M,) camera z
    color: np.ndarray  # (M, 3)
    opacity: np.ndarray  # (M,)
    source: np.ndarray  # (M,) original gaussian row

    def __len__(self):
        return self.mean2d.shape[0]


@dataclass
class TileBins:
    offsets: np.ndarray  # (n_tiles + 1,) int64, CSR offsets
    splats: np.ndarray  # (total,) int32 positions into the Splat2D arrays
    tiles_x: int
    tiles_y: int
    tile: int


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W) alpha-weighted expected depth
    alpha: np.ndarray  # (H, W) accumulated opacity
    final_t: np.ndarray  # (H, W) transmittance after the last processed splat
    n_contrib: np.ndarray  # (H, W) int32 processed splats per pixel
    splats: Splat2D
    bins: TileBins
    background: np.ndarray
    n_gaussians: int
    prep: dict  # intermediates retained for the backward chain


@dataclass
class GradBuffers:
    mean: np.ndarray  # (N, 3)
    rotation: np.ndarray  # (N, 4)
    scale: np.ndarray  # (N, 3)
    opacity: np.ndarray  # (N,)
    color: np.ndarray  # (N, 3)


def _quat_rotmats(q):
    """(N, 3, 3) rotation matrices from raw quaternions, normalized first."""
    n = np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = (q / n).T
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def prepare(means, rotations, scales, opacities, colors, pose: Pose,
            K: Intrinsics, tile: int = TILE, sigma_cutoff: float = 3.0):
    """Project gaussians to 2D splats, cull, sort, and bin into tiles.

    Returns ``(Splat2D, TileBins, prep)`` where ``prep`` holds intermediates
    the backward chain reuses. ``sigma_cutoff=inf`` disables the radius test
    and bins every visible splat into every tile (exact-gradient mode).
    """
    N = means.shape[0]
    R_cw = pose.R
    t_cam = means @ R_cw.T + pose.t  # (N, 3)
    front = t_cam[:, 2] > EPS_Z
    tz = np.where(front, t_cam[:, 2], 1.0)
    tx, ty = t_cam[:, 0], t_cam[:, 1]

    mean2d = np.empty((N, 2))
    mean2d[:, 0] = K.fx * tx / tz + K.cx
    mean2d[:, 1] = K.fy * ty / tz + K.cy

    # EWA: cov2d = J W Sigma W^T J^T + eps_aa I, W the camera rotation
    Rg = _quat_rotmats(rotations)
    A = Rg * scales[:, None, :]  # R diag(s)
    Sigma = A @ np.transpose(A, (0, 2, 1))
    J = np.zeros((N, 2, 3))
    J[:, 0, 0] = K.fx / tz
    J[:, 0, 2] = -K.fx * tx / tz**2
    J[:, 1, 1] = K.fy / tz
    J[:, 1, 2] = -K.fy * ty / tz**2
    M = J @ R_cw[None]
    cov_full = M @ Sigma @ np.transpose(M, (0, 2, 1))
    a = cov_full[:, 0, 0] + EPS_AA
    b = cov_full[:, 0, 1]
    c = cov_full[:, 1, 1] + EPS_AA

    det = a * c - b * b
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(lam_max)
    if np.isinf(sigma_cutoff):
        visible = front
        radius = np.full(N, max(K.width, K.height) * 2.0)
    else:
        radius = (sigma_cutoff / 3.0) * radius
        visible = (
            front
            & (mean2d[:, 0] + radius >= 0)
            & (mean2d[:, 0] - radius <= K.width - 1)
            & (mean2d[:, 1] + radius >= 0)
            & (mean2d[:, 1] - radius <= K.height - 1)
        )

    idx = np.nonzero(visible)[0]
    order = idx[np.argsort(t_cam[idx, 2], kind="stable")]
    inv_det = 1.0 / det[order]
    conic = np.stack(
        [c[order] * inv_det, -b[order] * inv_det, a[order] * inv_det], axis=1
    )
    splats = Splat2D(
        mean2d=mean2d[order],
        cov2d=np.stack([a[order], b[order], c[order]], axis=1),
        conic=conic,
        depth=t_cam[order, 2],
        color=np.asarray(colors, dtype=np.float64)[order],
        opacity=np.asarray(opacities, dtype=np.float64)[order],
        source=order,
    )
    bins = _bin_tiles(splats, radius[order], K.width, K.height, tile)
    prep = {
        "t_cam": t_cam,
        "Rg": Rg,
        "A": A,
        "Sigma": Sigma,
        "J": J,
        "M": M,
        "R_cw": R_cw,
        "order": order,
        "K": K,
        "raw_quats": np.asarray(rotations, dtype=np.float64),
        "scales": np.asarray(scales, dtype=np.float64),
        "n": N,
    }
    return splats, bins, prep


def _bin_tiles(splats: Splat2D, radius, width, height, tile) -> TileBins:
    """CSR tile lists preserving the canonical splat order within each tile."""
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    n_tiles = tiles_x * tiles_y
    M = len(splats)
    if M == 0:
        return TileBins(np.zeros(n_tiles + 1, dtype=np.int64),
                        np.zeros(0, dtype=np.int32), tiles_x, tiles_y, tile)
    x, y = splats.mean2d[:, 0], splats.mean2d[:, 1]
    tx0 = np.clip(((x - radius) // tile).astype(np.int64), 0, tiles_x - 1)
    tx1 = np.clip(((x + radius) // tile).astype(np.int64), 0, tiles_x - 1)
    ty0 = np.clip(((y - radius) // tile).astype(np.int64), 0, tiles_y - 1)
    ty1 = np.clip(((y + radius) // tile).astype(np.int64), 0, tiles_y - 1)
    spans_x = tx1 - tx0 + 1
    spans_y = ty1 - ty0 + 1
    tile_ids, positions = [], []
    for dy in range(int(spans_y.max())):
        for dx in range(int(spans_x.max())):
            m = (dx < spans_x) & (dy < spans_y)
            if not m.any():
                continue
            tid = (ty0[m] + dy) * tiles_x + (tx0[m] + dx)
            tile_ids.append(tid)
            positions.append(np.nonzero(m)[0])
    tile_ids = np.concatenate(tile_ids)
    positions = np.concatenate(positions)
    # sort by (tile, canonical position): stable ordering within tiles
    perm = np.lexsort((positions, tile_ids))
    tile_ids = tile_ids[perm]
    positions = positions[perm].astype(np.int32)
    counts = np.bincount(tile_ids, minlength=n_tiles)
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return TileBins(offsets, positions, tiles_x, tiles_y, tile)


def backward_chain(grads_2d, out: RenderOutput) -> GradBuffers:
    """Pull splat-space gradients back onto gaussian parameters.

    ``grads_2d`` is the kernel's output: per-visible-splat gradients w.r.t.
    mean2d, packed conic, color, opacity, and camera depth.
    """
    g_mean2d, g_conic, g_color, g_opacity, g_z = grads_2d
    prep = out.prep
    order = prep["order"]
    K: Intrinsics = prep["K"]
    N = prep["n"]
    res = GradBuffers(
        mean=np.zeros((N, 3)),
        rotation=np.zeros((N, 4)),
        scale=np.zeros((N, 3)),
        opacity=np.zeros((N,)),
        color=np.zeros((N, 3)),
    )
    if order.size == 0:
        return res
    res.color[order] = g_color
    res.opacity[order] = g_opacity

    Mw = prep["M"][order]  # (m, 2, 3)
    Sigma = prep["Sigma"][order]
    J = prep["J"][order]
    R_cw = prep["R_cw"]
    t_cam = prep["t_cam"][order]
    conic = out.splats.conic

    # conic (packed a, b, c with q = a dx^2 + 2 b dxdy + c dy^2) -> cov2d
    Gq = np.empty((order.size, 2, 2))
    Gq[:, 0, 0] = g_conic[:, 0]
    Gq[:, 0, 1] = Gq[:, 1, 0] = 0.5 * g_conic[:, 1]
    Gq[:, 1, 1] = g_conic[:, 2]
    Qf = np.empty((order.size, 2, 2))
    Qf[:, 0, 0] = conic[:, 0]
    Qf[:, 0, 1] = Qf[:, 1, 0] = conic[:, 1]
    Qf[:, 1, 1] = conic[:, 2]
    Gc = -Qf @ Gq @ Qf  # d(inverse): -Q G Q

    # cov2d = M Sigma M^T (+ const): split into Sigma and M(J(t)) paths
    GS = np.transpose(Mw, (0, 2, 1)) @ Gc @ Mw  # (m, 3, 3) dL/dSigma
    GM = 2.0 * (Gc @ Mw @ Sigma)  # dL/dM
    GJ = GM @ R_cw.T[None]  # dL/dJ

    tx, ty, tz = t_cam[:, 0], t_cam[:, 1], t_cam[:, 2]
    g_t = np.zeros((order.size, 3))
    g_t[:, 0] = GJ[:, 0, 2] * (-K.fx / tz**2)
    g_t[:, 1] = GJ[:, 1, 2] * (-K.fy / tz**2)
    g_t[:, 2] = (
        GJ[:, 0, 0] * (-K.fx / tz**2)
        + GJ[:, 0, 2] * (2 * K.fx * tx / tz**3)
        + GJ[:, 1, 1] * (-K.fy / tz**2)
        + GJ[:, 1, 2] * (2 * K.fy * ty / tz**3)
    )
    # mean2d = pi(t): the projection Jacobian is J itself
    g_t += np.einsum("mij,mi->mj", J, g_mean2d, optimize=False)
    g_t[:, 2] += g_z
    res.mean[order] = g_t @ R_cw  # R_cw^T g_t, batched

    # Sigma = A A^T with A = Rg diag(s)
    A = prep["A"][order]
    Rg = prep["Rg"][order]
    scales = prep["scales"][order]
    GA = 2.0 * (GS @ A)
    res.scale[order] = np.einsum("mak,mak->mk", GA, Rg, optimize=False)
    GR = GA * scales[:, None, :]

    # quaternion chain, through normalization
    q_raw = prep["raw_quats"][order]
    nrm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    qh = q_raw / nrm
    w, x, y, z = qh.T
    zero = np.zeros_like(w)
    dR = np.empty((order.size, 4, 3, 3))
    dR[:, 0] = 2 * np.stack([
        np.stack([zero, -z, y], axis=1),
        np.stack([z, zero, -x], axis=1),
        np.stack([-y, x, zero], axis=1),
    ], axis=1)
    dR[:, 1] = 2 * np.stack([
        np.stack([zero, y, z], axis=1),
        np.stack([y, -2 * x, -w], axis=1),
        np.stack([z, w, -2 * x], axis=1),
    ], axis=1)
    dR[:, 2] = 2 * np.stack([
        np.stack([-2 * y, x, w], axis=1),
        np.stack([x, zero, z], axis=1),
        np.stack([-w, z, -2 * y], axis=1),
    ], axis=1)
    dR[:, 3] = 2 * np.stack([
        np.stack([-2 * z, -w, x], axis=1),
        np.stack([w, -2 * z, y], axis=1),
        np.stack([x, y, zero], axis=1),
    ], axis=1)
    g_qh = np.einsum("mqab,mab->mq", dR, GR, optimize=False)
    # d(q/|q|)/dq = (I - qh qh^T) / |q|
    g_q = (g_qh - (g_qh * qh).sum(axis=1, keepdims=True) * qh) / nrm
    res.rotation[order] = g_q
    return res
