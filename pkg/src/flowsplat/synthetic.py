"""Synthetic scene generator with exact depth, pose, and pairwise-flow oracles.

The scene is a textured axis-aligned box room (inward-facing shell) containing
solid axis-aligned boxes, ray-traced on the CPU. Because depth and poses are
exact, pairwise flows generated here satisfy the reprojection identity to
floating-point precision, which makes the scene usable as ground truth for the
tracking solver and the mapping benches.

World frame matches the camera convention: x right, y down, z forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, InverseDepthMap, Pose, project

_BIG = 1e30


@dataclass
class Box:
    """Axis-aligned box; ``inward=True`` renders the interior shell (a room)."""

    lo: np.ndarray
    hi: np.ndarray
    inward: bool = False
    base_color: np.ndarray = field(default_factory=lambda: np.array([0.6, 0.6, 0.6]))
    texture_seed: int = 0

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        self.base_color = np.asarray(self.base_color, dtype=np.float64)


def _intersect_box(origins, dirs, box: Box):
    """Slab intersection; returns hit parameter t (camera depth) per ray."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t0 = (box.lo - origins) * inv
    t1 = (box.hi - origins) * inv
    tmin = np.minimum(t0, t1).max(axis=-1)
    tmax = np.maximum(t0, t1).min(axis=-1)
    if box.inward:
        t = tmax
        hit = (tmax > 1e-9) & (tmax >= tmin)
    else:
        t = tmin
        hit = (tmin > 1e-9) & (tmin <= tmax)
    return np.where(hit, t, _BIG)


def _face_axis(points, box: Box, eps=1e-6):
    """Index of the box face (0..5: -x,+x,-y,+y,-z,+z) each point lies on."""
    d_lo = np.abs(points - box.lo)
    d_hi = np.abs(points - box.hi)
    stacked = np.stack(
        [d_lo[..., 0], d_hi[..., 0], d_lo[..., 1], d_hi[..., 1], d_lo[..., 2], d_hi[..., 2]],
        axis=-1,
    )
    return np.argmin(stacked, axis=-1)


def _texture(points, face, box: Box):
    """Procedural multi-view-consistent color: smooth waves + a soft checker."""
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    s = box.texture_seed
    a = 2.1 + 0.7 * (s % 3)
    b = 1.7 + 0.5 * ((s + 1) % 3)
    w1 = np.sin(a * x + 0.7 * s) * np.sin(b * y + 1.3 * s)
    w2 = np.sin(1.3 * b * z + 0.4 * s) * np.cos(0.8 * a * x - 0.9 * s)
    checker = ((np.floor(1.5 * x + 0.25 * s) + np.floor(1.5 * y) + np.floor(1.5 * z)) % 2)
    shade = 1.0 - 0.06 * (face % 3)
    col = box.base_color[None, :] * shade[..., None]
    col = col * (0.82 + 0.14 * w1[..., None] + 0.10 * w2[..., None])
    col = col + 0.08 * (checker[..., None] - 0.5)
    return np.clip(col, 0.03, 0.97)


@dataclass
class SyntheticScene:
    """Box-room scene with an orbit trajectory and exact render/flow oracles."""

    intrinsics: Intrinsics
    boxes: list[Box]
    center: np.ndarray
    orbit_radius: float = 1.2
    sweep: float = 0.9  # radians of orbit swept over t in [0, 1]

    @classmethod
    def default(cls, width=64, height=64, seed=0):
        K = Intrinsics(
            fx=0.9 * width, fy=0.9 * width, cx=width / 2.0, cy=height / 2.0,
            width=width, height=height,
        )
        rng = np.random.default_rng(seed)
        room = Box(
            lo=[-2.6, -2.0, -1.5], hi=[2.6, 2.0, 5.0], inward=True,
            base_color=[0.75, 0.72, 0.66], texture_seed=0,
        )
        boxes = [room]
        specs = [
            ([-1.5, 0.6, 2.2], [-0.4, 2.0, 3.4], [0.80, 0.35, 0.30]),
            ([0.5, -0.2, 2.8], [1.6, 2.0, 4.0], [0.30, 0.55, 0.80]),
            ([-0.5, 1.0, 1.4], [0.4, 2.0, 2.1], [0.40, 0.75, 0.35]),
        ]
        for i, (lo, hi, c) in enumerate(specs):
            jitter = rng.uniform(-0.05, 0.05, 3)
            boxes.append(Box(lo=np.array(lo) + jitter, hi=np.array(hi) + jitter,
                             base_color=c, texture_seed=i + 1))
        return cls(intrinsics=K, boxes=boxes, center=np.array([0.0, 0.3, 2.8]))

    def pose_at(self, t: float) -> Pose:
        """Camera-from-world pose at trajectory parameter t in [0, 1]."""
        ang = (t - 0.5) * self.sweep
        eye = self.center + np.array(
            [self.orbit_radius * np.sin(ang),
             -0.25 + 0.1 * np.sin(2.3 * t),
             -2.4 - 0.15 * t],
        )
        return look_at(eye, self.center)

    def trajectory(self, n_frames: int) -> list[Pose]:
        ts = np.linspace(0.0, 1.0, n_frames)
        return [self.pose_at(t) for t in ts]

    def render(self, pose: Pose):
        """Exact (image, depth) at ``pose``; depth is camera z per pixel."""
        K = self.intrinsics
        rays_cam = K.unit_rays()  # z component 1, so hit parameter == camera depth
        R_wc = pose.R.T
        eye = -R_wc @ pose.t
        dirs = rays_cam @ R_wc.T
        origins = np.broadcast_to(eye, dirs.shape)
        depth = np.full(dirs.shape[:2], _BIG)
        owner = np.full(dirs.shape[:2], -1, dtype=np.int64)
        for i, box in enumerate(self.boxes):
            t = _intersect_box(origins, dirs, box)
            closer = t < depth
            depth = np.where(closer, t, depth)
            owner = np.where(closer, i, owner)
        image = np.zeros(dirs.shape[:2] + (3,))
        pts = origins + depth[..., None] * dirs
        for i, box in enumerate(self.boxes):
            m = owner == i
            if not m.any():
                continue
            face = _face_axis(pts[m], box)
            image[m] = _texture(pts[m], face, box)
        depth = np.where(owner >= 0, depth, 0.0)
        return image, depth

    def disparity(self, pose: Pose) -> InverseDepthMap:
        _, depth = self.render(pose)
        with np.errstate(divide="ignore"):
            disp = np.where(depth > 0, 1.0 / np.maximum(depth, 1e-12), 0.0)
        return InverseDepthMap(disp, depth > 0)

    def flow_pair(self, pose_i: Pose, pose_j: Pose, occlusion_tol=5e-3):
        """Exact flow i->j with a visibility mask (occlusion and bounds checked)."""
        K = self.intrinsics
        _, depth_i = self.render(pose_i)
        _, depth_j = self.render(pose_j)
        rays = K.unit_rays()
        pts_i = rays * depth_i[..., None]
        T_ij = pose_j @ pose_i.inverse()
        pts_j = pts_i @ T_ij.R.T + T_ij.t
        z_j = pts_j[..., 2]
        front = (z_j > 1e-6) & (depth_i > 0)
        uv = project(np.where(front[..., None], pts_j, np.array([0.0, 0.0, 1.0])), K)
        u, v = K.pixel_grid()
        flow = np.zeros(rays.shape[:2] + (2,))
        flow[..., 0] = uv[..., 0] - u
        flow[..., 1] = uv[..., 1] - v
        inb = (
            (uv[..., 0] >= 0) & (uv[..., 0] <= K.width - 1)
            & (uv[..., 1] >= 0) & (uv[..., 1] <= K.height - 1) & front
        )
        # occlusion: the transformed point must match frame j's depth there
        iu = np.clip(np.round(uv[..., 0]).astype(int), 0, K.width - 1)
        iv = np.clip(np.round(uv[..., 1]).astype(int), 0, K.height - 1)
        seen = np.abs(z_j - depth_j[iv, iu]) <= occlusion_tol * np.maximum(depth_j[iv, iu], 1e-9)
        visible = inb & seen
        flow[~front] = 0.0
        return flow, visible


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> Pose:
    """Camera-from-world pose with z forward toward ``target``, y down."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    upw = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upw)
    n = np.linalg.norm(right)
    if n < 1e-9:
        right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
        n = np.linalg.norm(right)
    right /= n
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)
    return Pose.from_matrix(R, -R @ eye)
