"""Trajectory and image-quality metrics."""

from __future__ import annotations

import numpy as np

from .losses import ms_ssim, ssim

PSNR_CAP = 99.0


class MetricInputError(ValueError):
    pass


def umeyama_sim3(src, dst):
    """Closed-form similarity (s, R, t) minimizing ||dst - (s R src + t)||^2.

    ``src`` and ``dst`` are (N, 3) point sets; N >= 3.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.shape[0] < 3:
        raise MetricInputError("need >= 3 associated points of equal shape")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    X = src - mu_s
    Y = dst - mu_d
    cov = Y.T @ X / src.shape[0]
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_s = (X**2).sum() / src.shape[0]
    if var_s < 1e-30:
        s = 1.0
    else:
        s = float(np.trace(np.diag(D) @ S) / var_s)
    t = mu_d - s * R @ mu_s
    return s, R, t


def ate_rmse(estimated, ground_truth):
    """(rmse, std) of translational residuals after Sim(3) alignment.

    Inputs are (N, 3) arrays of camera positions associated by index.
    """
    est = np.asarray(estimated, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.float64)
    if est.shape != gt.shape:
        raise MetricInputError("trajectory lengths differ")
    if est.shape[0] < 3:
        raise MetricInputError("need at least 3 poses")
    s, R, t = umeyama_sim3(est, gt)
    aligned = est @ (s * R).T + t
    err = np.linalg.norm(aligned - gt, axis=1)
    rmse = float(np.sqrt((err**2).mean()))
    return rmse, float(err.std())


def psnr(rendered, target) -> float:
    """10 log10(1 / MSE) for [0, 1] images, capped at 99 dB."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise MetricInputError("image dimensions differ")
    mse = float(((rendered - target) ** 2).mean())
    if mse < 1e-10:
        return PSNR_CAP
    return min(float(10.0 * np.log10(1.0 / mse)), PSNR_CAP)


def image_metrics(rendered, target):
    """(psnr, ssim, ms_ssim) triple; MS-SSIM falls back to SSIM when the
    image is too small for three scales."""
    from .losses import LossInputError

    p = psnr(rendered, target)
    s = ssim(rendered, target).value
    try:
        m = ms_ssim(rendered, target).value
    except LossInputError:
        m = s
    return p, s, m
