"""First-order adaptive-moment optimizer for gaussian appearance and shape.

SLAM owns the gaussian positions (re-placed by the map lifecycle); the
optimizer updates rotation, scale, opacity, and color from rendering-loss
gradients. Means can be optimized too behind a flag, but that is off by
default. After each step quaternions are renormalized and scales, opacities,
and colors clamped back to their valid ranges.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, Pose
from .losses import LossWeights, total_loss
from .rasterizer import GradBuffers, render, render_backward
from .splats import GaussianMap


@dataclass
class MappingConfig:
    n_steps: int = 30  # optimizer steps per new keyframe
    lr_mean: float = 1.6e-4  # scaled by scene extent; used only if means opt-in
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    optimize_means: bool = False


class MapOptimizer:
    """Adam over (rotation, scale, opacity, color), optionally means."""

    PARAMS = ("mean", "rotation", "scale", "opacity", "color")

    def __init__(self, gmap: GaussianMap, config: MappingConfig,
                 scene_extent: float | None = None):
        self.gmap = gmap
        self.config = config
        if scene_extent is None:
            scene_extent = map_extent(gmap)
        self.scene_extent = scene_extent
        n = len(gmap)
        self._m = {p: np.zeros(self._shape(p, n)) for p in self.PARAMS}
        self._v = {p: np.zeros(self._shape(p, n)) for p in self.PARAMS}
        self._t = 0

    @staticmethod
    def _shape(param, n):
        return {"mean": (n, 3), "rotation": (n, 4), "scale": (n, 3),
                "opacity": (n,), "color": (n, 3)}[param]

    def _lr(self, param):
        c = self.config
        return {
            "mean": c.lr_mean * self.scene_extent,
            "rotation": c.lr_rotation,
            "scale": c.lr_scale,
            "opacity": c.lr_opacity,
            "color": c.lr_color,
        }[param]

    def step(self, grads: GradBuffers):
        if len(self.gmap) != self._m["opacity"].shape[0]:
            raise ValueError("map size changed; rebuild the optimizer")
        c = self.config
        self._t += 1
        bias1 = 1.0 - c.beta1**self._t
        bias2 = 1.0 - c.beta2**self._t
        targets = {
            "rotation": self.gmap.rotations,
            "scale": self.gmap.scales,
            "opacity": self.gmap.opacities,
            "color": self.gmap.colors,
        }
        if c.optimize_means:
            targets["mean"] = self.gmap.means
        grad_of = {"mean": grads.mean, "rotation": grads.rotation,
                   "scale": grads.scale, "opacity": grads.opacity,
                   "color": grads.color}
        for p, arr in targets.items():
            g = grad_of[p]
            self._m[p] = c.beta1 * self._m[p] + (1 - c.beta1) * g
            self._v[p] = c.beta2 * self._v[p] + (1 - c.beta2) * g * g
            m_hat = self._m[p] / bias1
            v_hat = self._v[p] / bias2
            arr -= self._lr(p) * m_hat / (np.sqrt(v_hat) + c.eps)
        self._project()

    def _project(self):
        g = self.gmap
        norms = np.linalg.norm(g.rotations, axis=1, keepdims=True)
        np.divide(g.rotations, np.maximum(norms, 1e-12), out=g.rotations)
        np.clip(g.scales, g.config.s_min, g.config.s_max, out=g.scales)
        np.clip(g.opacities, 0.0, 1.0, out=g.opacities)
        np.clip(g.colors, 0.0, 1.0, out=g.colors)


def map_extent(gmap: GaussianMap) -> float:
    if len(gmap) == 0:
        return 1.0
    centered = gmap.means - gmap.means.mean(axis=0)
    return max(float(np.linalg.norm(centered, axis=1).max()), 1e-6)


def mapping_round(gmap: GaussianMap, views, K: Intrinsics,
                  weights: LossWeights, config: MappingConfig,
                  background=(0.0, 0.0, 0.0), n_steps: int | None = None):
    """Run optimizer steps cycling deterministically over (pose, image) views.

    Returns the per-step loss values. Views are visited newest-first,
    wrapping around.
    """
    if len(gmap) == 0 or not views:
        return []
    opt = MapOptimizer(gmap, config)
    losses = []
    n_steps = config.n_steps if n_steps is None else n_steps
    for s in range(n_steps):
        pose, image = views[-1 - (s % len(views))]
        out = render(gmap, pose, K, background=background)
        lv = total_loss(out, image, K, weights)
        grads = render_backward(out, lv.grad_color, lv.grad_depth)
        opt.step(grads)
        losses.append(lv.value)
    return losses
