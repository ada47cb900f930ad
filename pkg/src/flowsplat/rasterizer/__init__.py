"""Deterministic tile rasterizer for the gaussian map: forward rendering of
color / expected-depth / alpha with an exact analytic backward pass.

The per-pixel compositing loops are the hot kernels. A compiled Cython
extension is used when available; a pure-numpy implementation with identical
semantics is the fallback. Selection happens at import and can be forced with
``FLOWSPLAT_KERNELS=numpy`` or ``FLOWSPLAT_KERNELS=cython``.
"""

from __future__ import annotations

import os

import numpy as np

from ..geometry import Intrinsics, Pose
from ._frontend import (
    ALPHA_CLAMP,
    EPS_AA,
    T_MIN,
    TILE,
    GradBuffers,
    RenderOutput,
    Splat2D,
    backward_chain,
    prepare,
)
from . import _slow

_requested = os.environ.get("FLOWSPLAT_KERNELS", "").strip().lower()
if _requested == "numpy":
    _kernels = _slow
elif _requested == "cython":
    from . import _kernels  # noqa: F401  (raises if the extension is missing)
else:
    try:
        from . import _kernels
    except ImportError:
        _kernels = _slow

backend_name: str = _kernels.BACKEND_NAME


def available_backends():
    out = {"numpy": _slow}
    try:
        from . import _kernels as compiled

        if compiled is not _slow:
            out["cython"] = compiled
    except ImportError:
        pass
    return out


def _as_arrays(source):
    """(means, rotations, scales, opacities, colors) from a map or a tuple."""
    if hasattr(source, "means"):
        return (source.means, source.rotations, source.scales,
                source.opacities, source.colors)
    return source


def project_gaussian(mean, rotation, scale, opacity, color, pose: Pose,
                     K: Intrinsics):
    """Project a single gaussian; returns a one-splat Splat2D or None if culled."""
    splats, _, _ = prepare(
        np.asarray(mean, dtype=np.float64)[None],
        np.asarray(rotation, dtype=np.float64)[None],
        np.asarray(scale, dtype=np.float64)[None],
        np.asarray([opacity], dtype=np.float64),
        np.asarray(color, dtype=np.float64)[None],
        pose, K,
    )
    if len(splats) == 0:
        return None
    return splats


def render(source, pose: Pose, K: Intrinsics, background=(0.0, 0.0, 0.0),
           tile: int = TILE, sigma_cutoff: float = 3.0,
           kernels=None) -> RenderOutput:
    """Render the map from ``pose``; retains buffers for the backward pass.

    Splats composite front-to-back (depth sort, gaussian index as tie-break),
    per-pixel alpha is ``min(0.99, opacity * exp(-q/2))``, accumulation stops
    once transmittance drops below 1e-4, and the depth output is the
    alpha-weighted expected camera depth. Identical inputs give bit-identical
    images.
    """
    kern = kernels or _kernels
    means, rotations, scales, opacities, colors = _as_arrays(source)
    bg = np.ascontiguousarray(background, dtype=np.float64)
    splats, bins, prep = prepare(
        np.asarray(means, dtype=np.float64),
        np.asarray(rotations, dtype=np.float64),
        np.asarray(scales, dtype=np.float64),
        np.asarray(opacities, dtype=np.float64),
        np.asarray(colors, dtype=np.float64),
        pose, K, tile=tile, sigma_cutoff=sigma_cutoff,
    )
    color_img, depth_img, alpha_img, final_t, n_contrib = kern.forward(
        bins.offsets, bins.splats, bins.tiles_x, bins.tiles_y, bins.tile,
        np.ascontiguousarray(splats.mean2d), np.ascontiguousarray(splats.conic),
        np.ascontiguousarray(splats.color), np.ascontiguousarray(splats.opacity),
        np.ascontiguousarray(splats.depth), K.height, K.width, bg,
        T_MIN, ALPHA_CLAMP,
    )
    return RenderOutput(
        color=color_img, depth=depth_img, alpha=alpha_img, final_t=final_t,
        n_contrib=n_contrib, splats=splats, bins=bins, background=bg,
        n_gaussians=np.asarray(means).shape[0], prep=prep,
    )


def render_backward(out: RenderOutput, dl_dcolor, dl_ddepth=None,
                    kernels=None) -> GradBuffers:
    """Exact gradients of the rendered color/depth images w.r.t. every
    gaussian parameter. Gaussians that contributed to no pixel get zeros."""
    kern = kernels or _kernels
    if dl_ddepth is None:
        dl_ddepth = np.zeros_like(out.depth)
    splats, bins = out.splats, out.bins
    grads_2d = kern.backward(
        bins.offsets, bins.splats, bins.tiles_x, bins.tiles_y, bins.tile,
        np.ascontiguousarray(splats.mean2d), np.ascontiguousarray(splats.conic),
        np.ascontiguousarray(splats.color), np.ascontiguousarray(splats.opacity),
        np.ascontiguousarray(splats.depth),
        out.color.shape[0], out.color.shape[1], out.background,
        np.ascontiguousarray(out.final_t), np.ascontiguousarray(out.n_contrib),
        np.ascontiguousarray(out.alpha), np.ascontiguousarray(out.depth),
        np.ascontiguousarray(dl_dcolor, dtype=np.float64),
        np.ascontiguousarray(dl_ddepth, dtype=np.float64),
        T_MIN, ALPHA_CLAMP,
    )
    return backward_chain(grads_2d, out)
