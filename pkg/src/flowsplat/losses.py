"""Photometric and geometric losses with analytic gradients.

Every loss returns a ``LossValue`` carrying the scalar and gradient images
w.r.t. the rendered inputs. SSIM uses an 11x11 Gaussian window (sigma 1.5)
over valid (fully interior) window positions; MS-SSIM averages SSIM over
three scales produced by stride-2 average pooling. The geometry loss
penalizes normal-map gradients modulated by an image-edge weight, with
normals derived from the back-projected position map of the rendered depth;
its gradient flows to the depth image (the RGB image is a constant there).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d, correlate2d

from .geometry import Intrinsics

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2  # (K1 L)^2, L = 1 for [0, 1] images
SSIM_C2 = 0.03**2
MS_SSIM_SCALES = 3


class LossInputError(ValueError):
    pass


@dataclass
class LossValue:
    value: float
    grad_color: np.ndarray | None = None  # d value / d rendered color
    grad_depth: np.ndarray | None = None  # d value / d rendered depth


@dataclass
class LossWeights:
    lambda_ms_ssim: float = 0.2
    lambda_geo: float = 0.1
    q: float = 2.0  # power-weighting exponent
    sigma: float = 0.5  # smooth-weighting width
    mode: str = "smooth"  # {"power", "smooth"}

    def __post_init__(self):
        if not 0.0 <= self.lambda_ms_ssim <= 1.0:
            raise ValueError("lambda_ms_ssim must be in [0, 1]")
        if self.lambda_geo < 0 or self.sigma <= 0:
            raise ValueError("invalid loss weights")
        if self.mode not in ("power", "smooth"):
            raise ValueError(f"unknown weighting mode {self.mode!r}")


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise LossInputError(f"shape mismatch: {a.shape} vs {b.shape}")


def l1_loss(rendered, target) -> LossValue:
    """Mean absolute difference; subgradient sign(r - t)/N with sign(0) = 0."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_same_shape(rendered, target)
    diff = rendered - target
    value = float(np.abs(diff).mean())
    grad = np.sign(diff) / diff.size
    return LossValue(value, grad_color=grad)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (r / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_channel(x, y, w):
    """Per-window SSIM map plus everything the gradient needs."""
    mu_x = correlate2d(x, w, mode="valid")
    mu_y = correlate2d(y, w, mode="valid")
    sxx = correlate2d(x * x, w, mode="valid") - mu_x**2
    syy = correlate2d(y * y, w, mode="valid") - mu_y**2
    sxy = correlate2d(x * y, w, mode="valid") - mu_x * mu_y
    A1 = 2 * mu_x * mu_y + SSIM_C1
    B1 = mu_x**2 + mu_y**2 + SSIM_C1
    A2 = 2 * sxy + SSIM_C2
    B2 = sxx + syy + SSIM_C2
    V = (A1 * A2) / (B1 * B2)
    return V, (mu_x, mu_y, A1, B1, A2, B2)


def _ssim_channel_grad(x, y, w, stats, scale):
    """Gradient of mean(V) * scale w.r.t. x."""
    mu_x, mu_y, A1, B1, A2, B2 = stats
    dA1 = A2 / (B1 * B2)
    dB1 = -(A1 * A2) / (B1**2 * B2)
    dA2 = A1 / (B1 * B2)
    dB2 = -(A1 * A2) / (B1 * B2**2)
    d_mu = dA1 * 2 * mu_y + dB1 * 2 * mu_x
    d_sxx = dB2
    d_sxy = dA2 * 2.0
    # window moments: mu_x = sum w x; sxx = sum w x^2 - mu^2; sxy = sum w xy - mu mu
    # d/dx_i = w_i [d_mu + d_sxx (2x_i - 2mu_x) + d_sxy (y_i - mu_y)]
    g = convolve2d(d_mu - 2.0 * d_sxx * mu_x - d_sxy * mu_y, w, mode="full")
    g += 2.0 * x * convolve2d(d_sxx, w, mode="full")
    g += y * convolve2d(d_sxy, w, mode="full")
    return g * scale


def _channels(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[..., None]
    return img


def ssim(rendered, target, window: int = SSIM_WINDOW) -> LossValue:
    """Mean local SSIM with a Gaussian window; gradient w.r.t. ``rendered``."""
    x3 = _channels(rendered)
    y3 = _channels(target)
    _check_same_shape(x3, y3)
    h, wd = x3.shape[:2]
    if h < window or wd < window:
        raise LossInputError(f"image {h}x{wd} smaller than the {window} window")
    w = gaussian_window(window)
    n_ch = x3.shape[2]
    total = 0.0
    grad = np.zeros_like(x3)
    n_windows = (h - window + 1) * (wd - window + 1)
    for c in range(n_ch):
        V, stats = _ssim_channel(x3[..., c], y3[..., c], w)
        total += float(V.mean())
        grad[..., c] = _ssim_channel_grad(
            x3[..., c], y3[..., c], w, stats, 1.0 / (n_windows * n_ch)
        )
    value = total / n_ch
    if np.asarray(rendered).ndim == 2:
        grad = grad[..., 0]
    return LossValue(value, grad_color=grad)


def _avg_pool2(img):
    """2x2 average pooling with stride 2 (odd trailing row/col dropped)."""
    h, w = img.shape[:2]
    h2, w2 = h // 2, w // 2
    v = img[: 2 * h2, : 2 * w2]
    return 0.25 * (v[0::2, 0::2] + v[1::2, 0::2] + v[0::2, 1::2] + v[1::2, 1::2])


def _avg_pool2_adjoint(grad, shape):
    out = np.zeros(shape, dtype=np.float64)
    h2, w2 = grad.shape[:2]
    for dy in (0, 1):
        for dx in (0, 1):
            out[dy : 2 * h2 : 2, dx : 2 * w2 : 2] += 0.25 * grad
    return out


def ms_ssim(rendered, target) -> LossValue:
    """SSIM averaged over three dyadic scales (stride-2 average pooling)."""
    x = _channels(rendered)
    y = _channels(target)
    _check_same_shape(x, y)
    h, w = x.shape[:2]
    if h // 4 < SSIM_WINDOW or w // 4 < SSIM_WINDOW:
        raise LossInputError(
            f"image {h}x{w} too small for {MS_SSIM_SCALES} SSIM scales"
        )
    values = []
    grads = []
    shapes = []
    xs, ys = x, y
    for s in range(MS_SSIM_SCALES):
        r = ssim(xs, ys)
        values.append(r.value)
        grads.append(r.grad_color)
        shapes.append(xs.shape)
        if s + 1 < MS_SSIM_SCALES:
            xs = _avg_pool2(xs)
            ys = _avg_pool2(ys)
    # backpropagate each scale's gradient through its pooling chain
    total_grad = np.zeros_like(x)
    for s in range(MS_SSIM_SCALES):
        g = grads[s] / MS_SSIM_SCALES
        for back in range(s, 0, -1):
            g = _avg_pool2_adjoint(g, shapes[back - 1])
        total_grad += g
    value = float(np.mean(values))
    if np.asarray(rendered).ndim == 2:
        total_grad = total_grad[..., 0]
    return LossValue(value, grad_color=total_grad)


def rgb_loss(rendered, target, weights: LossWeights) -> LossValue:
    """(1 - lam) L1 + lam (1 - MS-SSIM)."""
    lam = weights.lambda_ms_ssim
    r1 = l1_loss(rendered, target)
    if lam == 0.0:
        return r1
    rm = ms_ssim(rendered, target)
    value = (1.0 - lam) * r1.value + lam * (1.0 - rm.value)
    grad = (1.0 - lam) * r1.grad_color - lam * rm.grad_color
    return LossValue(value, grad_color=grad)


def _diff(F, axis):
    """Per-pixel derivative: central interior, one-sided at the borders."""
    d = np.empty_like(F)
    sl = [slice(None)] * F.ndim

    def ax(sel):
        s = list(sl)
        s[axis] = sel
        return tuple(s)

    d[ax(slice(1, -1))] = 0.5 * (F[ax(slice(2, None))] - F[ax(slice(0, -2))])
    d[ax(slice(0, 1))] = F[ax(slice(1, 2))] - F[ax(slice(0, 1))]
    d[ax(slice(-1, None))] = F[ax(slice(-1, None))] - F[ax(slice(-2, -1))]
    return d


def _diff_adjoint(G, axis):
    """Adjoint of :func:`_diff`."""
    out = np.zeros_like(G)
    sl = [slice(None)] * G.ndim

    def ax(sel):
        s = list(sl)
        s[axis] = sel
        return tuple(s)

    out[ax(slice(2, None))] += 0.5 * G[ax(slice(1, -1))]
    out[ax(slice(0, -2))] -= 0.5 * G[ax(slice(1, -1))]
    out[ax(slice(1, 2))] += G[ax(slice(0, 1))]
    out[ax(slice(0, 1))] -= G[ax(slice(0, 1))]
    out[ax(slice(-1, None))] += G[ax(slice(-1, None))]
    out[ax(slice(-2, -1))] -= G[ax(slice(-1, None))]
    return out


def _stencil_valid(valid, axis):
    """True where every pixel the _diff stencil reads is valid."""
    ok = valid.copy()
    sl = [slice(None)] * valid.ndim

    def ax(sel):
        s = list(sl)
        s[axis] = sel
        return tuple(s)

    ok[ax(slice(1, -1))] &= valid[ax(slice(2, None))] & valid[ax(slice(0, -2))]
    ok[ax(slice(0, 1))] &= valid[ax(slice(1, 2))]
    ok[ax(slice(-1, None))] &= valid[ax(slice(-2, -1))]
    return ok


def normal_from_depth(depth, K: Intrinsics):
    """Unit camera-facing normals from the back-projected position map.

    Returns ``(normals (H, W, 3), valid (H, W))``. Normals are undefined
    (flagged invalid, set to zero) where depth is non-positive in the stencil
    or the cross product degenerates.
    """
    depth = np.asarray(depth, dtype=np.float64)
    rays = K.unit_rays()
    P = depth[..., None] * rays
    dPu = _diff(P, axis=1)
    dPv = _diff(P, axis=0)
    n_raw = -np.cross(dPu, dPv)
    norm = np.linalg.norm(n_raw, axis=-1)
    dvalid = depth > 0
    valid = (
        _stencil_valid(dvalid, axis=1)
        & _stencil_valid(dvalid, axis=0)
        & (norm > 1e-12)
    )
    N = np.where(valid[..., None], n_raw / np.maximum(norm, 1e-12)[..., None], 0.0)
    return N, valid


def edge_weight(grad_mag, weights: LossWeights):
    """Edge-aware modulation of normal-gradient penalties.

    Power mode: (x - 1)^q. Smooth mode: exp(-|x - 1|^2 / sigma^2), bounded in
    (0, 1] with its peak at x = 1.
    """
    x = np.asarray(grad_mag, dtype=np.float64)
    if weights.mode == "power":
        return (x - 1.0) ** weights.q
    return np.exp(-np.abs(x - 1.0) ** 2 / weights.sigma**2)


def _image_gradient_weight(image, weights: LossWeights):
    """Edge weight field from the grayscale image gradient (constant input)."""
    gray = _channels(image).mean(axis=-1)
    gx = _diff(gray, axis=1)
    gy = _diff(gray, axis=0)
    mag = np.sqrt(gx * gx + gy * gy)
    p99 = np.percentile(mag, 99)
    if p99 > 0:
        mag = np.clip(mag / p99, 0.0, 1.0)
    else:
        mag = np.zeros_like(mag)
    return edge_weight(mag, weights)


def geo_loss(depth, image, K: Intrinsics, weights: LossWeights) -> LossValue:
    """Edge-aware normal-smoothness penalty; gradient w.r.t. the depth image.

    value = mean over pixels of |grad N| * omega(|grad I|), where |grad N| is
    the mean over the three normal channels of the finite-difference gradient
    magnitude, and omega is the selected edge weighting of the normalized
    image gradient. Invalid normals contribute zero.
    """
    depth = np.asarray(depth, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    if depth.shape != image.shape[:2]:
        raise LossInputError("depth and image dimensions disagree")
    H, W = depth.shape
    omega = _image_gradient_weight(image, weights)

    N, valid = normal_from_depth(depth, K)
    mx = _stencil_valid(valid, axis=1)
    my = _stencil_valid(valid, axis=0)
    Nx = _diff(N, axis=1) * mx[..., None]
    Ny = _diff(N, axis=0) * my[..., None]
    mag = np.sqrt(Nx**2 + Ny**2)  # (H, W, 3) per channel
    grad_N_mag = mag.mean(axis=-1)
    value = float((grad_N_mag * omega).mean())

    # ---- reverse pass to the depth image ----
    d_gradmag = omega / (H * W)
    d_mag = np.repeat(d_gradmag[..., None] / 3.0, 3, axis=-1)
    safe = np.where(mag > 0, mag, 1.0)
    dNx = d_mag * Nx / safe
    dNy = d_mag * Ny / safe
    dN = _diff_adjoint(dNx * mx[..., None], axis=1)
    dN += _diff_adjoint(dNy * my[..., None], axis=0)

    # N = n_raw / |n_raw| (valid pixels only)
    rays = K.unit_rays()
    P = depth[..., None] * rays
    dPu = _diff(P, axis=1)
    dPv = _diff(P, axis=0)
    n_raw = -np.cross(dPu, dPv)
    norm = np.maximum(np.linalg.norm(n_raw, axis=-1), 1e-12)
    Nhat = np.where(valid[..., None], n_raw / norm[..., None], 0.0)
    dN = np.where(valid[..., None], dN, 0.0)
    d_nraw = (dN - (dN * Nhat).sum(-1, keepdims=True) * Nhat) / norm[..., None]
    # n_raw = -(dPu x dPv): adjoints of the cross product
    d_dPu = -np.cross(dPv, d_nraw)
    d_dPv = -np.cross(d_nraw, dPu)
    dP = _diff_adjoint(d_dPu, axis=1) + _diff_adjoint(d_dPv, axis=0)
    d_depth = (dP * rays).sum(axis=-1)
    return LossValue(value, grad_depth=d_depth)


def total_loss(render_out, target_image, K: Intrinsics,
               weights: LossWeights) -> LossValue:
    """Composite objective: rgb_loss + lambda_geo * geo_loss.

    ``render_out`` must expose ``color`` and ``depth`` images; gradients are
    routed to the color and depth inputs for the rasterizer backward pass.
    """
    r = rgb_loss(render_out.color, target_image, weights)
    if weights.lambda_geo == 0.0:
        return LossValue(r.value, grad_color=r.grad_color,
                         grad_depth=np.zeros_like(render_out.depth))
    g = geo_loss(render_out.depth, target_image, K, weights)
    return LossValue(
        r.value + weights.lambda_geo * g.value,
        grad_color=r.grad_color,
        grad_depth=weights.lambda_geo * g.grad_depth,
    )
