"""Gaussian map: covariance decomposition, spawning, and the mask-driven
update / prune / densify lifecycle.

Gaussians are stored as structure-of-arrays. Each live (non-frozen) gaussian
is linked to exactly one pixel of one windowed keyframe; tracking results
re-place its mean, mask transitions prune it or spawn successors. There are no
clone/split heuristics: density comes entirely from the keyframe pixel grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Intrinsics, Pose, quat_to_matrix
from .graph import FactorGraph, Keyframe


class SpawnRefusedError(ValueError):
    """Spawn attempted on an invalid or already-provenanced pixel."""


class MapConsistencyError(RuntimeError):
    """A live pixel lost its gaussian link (internal invariant broken)."""


@dataclass
class MapConfig:
    alpha0: float = 0.5  # initial opacity
    kappa: float = 1.0  # footprint multiplier: s0 = kappa * z / fx
    s_min: float = 1e-6
    s_max: float = 1.0
    stride: int = 4  # pixel grid used for densification


@dataclass
class SiadReport:
    updated: int = 0
    pruned: int = 0
    spawned: int = 0


def covariance_from(q, s) -> np.ndarray:
    """3x3 covariance R S S^T R^T from a unit quaternion and per-axis scales."""
    R = quat_to_matrix(q)
    A = R * np.asarray(s, dtype=np.float64)[None, :]  # R @ diag(s)
    return A @ A.T


def _world_points(kf: Keyframe, K: Intrinsics) -> np.ndarray:
    """(H, W, 3) world positions implied by the keyframe pose and disparity."""
    rays = K.unit_rays()
    safe_d = np.where(kf.disparity.valid, kf.disparity.disparity, 1.0)
    pts_cam = rays / safe_d[..., None]
    w_from_c = kf.pose.inverse()
    return pts_cam @ w_from_c.R.T + w_from_c.t


class GaussianMap:
    """Indexed gaussian collection with per-pixel provenance."""

    def __init__(self, config: MapConfig | None = None):
        self.config = config or MapConfig()
        self.means = np.zeros((0, 3))
        self.rotations = np.zeros((0, 4))  # (w, x, y, z), unit
        self.scales = np.zeros((0, 3))
        self.opacities = np.zeros((0,))
        self.colors = np.zeros((0, 3))
        self.frozen = np.zeros((0,), dtype=bool)
        self.prov_kf = np.zeros((0,), dtype=np.int64)  # -1 once frozen
        self.prov_pix = np.zeros((0, 2), dtype=np.int64)  # (v, u)
        self._index: dict[int, dict[tuple[int, int], int]] = {}  # kf -> (v,u) -> row

    def __len__(self):
        return self.means.shape[0]

    @property
    def live_count(self) -> int:
        return int((~self.frozen).sum())

    def lookup(self, kf_id: int, v: int, u: int) -> int | None:
        return self._index.get(kf_id, {}).get((v, u))

    def _append_many(self, mu, q, s, alpha, color, kf_id, pix):
        start = len(self)
        n = mu.shape[0]
        self.means = np.concatenate([self.means, mu])
        self.rotations = np.concatenate([self.rotations, q])
        self.scales = np.concatenate([self.scales, s])
        self.opacities = np.concatenate([self.opacities, alpha])
        self.colors = np.concatenate([self.colors, color])
        self.frozen = np.concatenate([self.frozen, np.zeros(n, dtype=bool)])
        self.prov_kf = np.concatenate([self.prov_kf, np.full(n, kf_id, dtype=np.int64)])
        self.prov_pix = np.concatenate([self.prov_pix, pix.astype(np.int64)])
        table = self._index.setdefault(kf_id, {})
        for k in range(n):
            table[(int(pix[k, 0]), int(pix[k, 1]))] = start + k
        return start

    def _spawn_batch(self, kf: Keyframe, K: Intrinsics, pv, pu) -> int:
        """Spawn gaussians at the given (already validated) pixels."""
        if pv.size == 0:
            return 0
        d = kf.disparity.disparity[pv, pu]
        z = 1.0 / d
        world = _world_points(kf, K)[pv, pu]
        cfg = self.config
        s0 = np.clip(cfg.kappa * z / K.fx, cfg.s_min, cfg.s_max)
        scales = np.repeat(s0[:, None], 3, axis=1)
        quats = np.zeros((pv.size, 4))
        quats[:, 0] = 1.0
        self._append_many(
            world, quats, scales, np.full(pv.size, cfg.alpha0),
            kf.image[pv, pu], kf.id, np.stack([pv, pu], axis=1),
        )
        return pv.size

    def spawn_from_pixel(self, kf: Keyframe, p, K: Intrinsics) -> int:
        """New gaussian back-projected from a valid, unclaimed keyframe pixel."""
        u, v = int(p[0]), int(p[1])
        if not kf.mask.valid[v, u] or not kf.disparity.valid[v, u]:
            raise SpawnRefusedError(f"pixel ({u}, {v}) of keyframe {kf.id} invalid")
        if self.lookup(kf.id, v, u) is not None:
            raise SpawnRefusedError(f"pixel ({u}, {v}) of keyframe {kf.id} already owned")
        self._spawn_batch(kf, K, np.array([v]), np.array([u]))
        return len(self) - 1

    def densify_stride_grid(self, kf: Keyframe, K: Intrinsics,
                            stride: int | None = None) -> int:
        """Spawn at valid, unclaimed grid pixels (stride*a, stride*b); idempotent."""
        stride = self.config.stride if stride is None else stride
        if stride < 1:
            raise ValueError("stride must be >= 1")
        h, w = kf.disparity.shape
        grid = np.zeros((h, w), dtype=bool)
        grid[::stride, ::stride] = True
        sel = grid & kf.mask.valid & kf.disparity.valid
        owned = self._index.get(kf.id, {})
        pv, pu = np.nonzero(sel)
        fresh = np.array(
            [(int(v), int(u)) not in owned for v, u in zip(pv, pu)], dtype=bool
        ) if pv.size else np.zeros(0, dtype=bool)
        return self._spawn_batch(kf, K, pv[fresh], pu[fresh])

    def freeze_keyframe(self, kf_id: int):
        """Mark a retired keyframe's gaussians frozen; they drop provenance."""
        rows = list(self._index.pop(kf_id, {}).values())
        if rows:
            self.frozen[rows] = True
            self.prov_kf[rows] = -1

    def _remove_rows(self, rows):
        if not len(rows):
            return
        keep = np.ones(len(self), dtype=bool)
        keep[rows] = False
        remap = np.cumsum(keep) - 1
        self.means = self.means[keep]
        self.rotations = self.rotations[keep]
        self.scales = self.scales[keep]
        self.opacities = self.opacities[keep]
        self.colors = self.colors[keep]
        self.frozen = self.frozen[keep]
        self.prov_kf = self.prov_kf[keep]
        self.prov_pix = self.prov_pix[keep]
        self._index = {
            kf_id: {
                pix: int(remap[row]) for pix, row in table.items() if keep[row]
            }
            for kf_id, table in self._index.items()
        }

    def siad_apply(self, graph: FactorGraph, increments, K: Intrinsics,
                   enable_prune: bool = True, enable_spawn: bool = True) -> SiadReport:
        """Apply one round of mask-transition maintenance over the window.

        Per windowed keyframe: every linked pixel still valid gets its mean
        re-placed from the post-update pose and disparity; linked pixels gone
        invalid lose their gaussian; newly-valid grid pixels spawn one.
        ``increments`` is the record emitted by the tracking batch whose state
        the graph now holds. Keyframes are processed in id order. The prune
        and spawn stages can be switched off independently (ablation support);
        position updates always run.

        Pruning requires affirmative evidence: pixels that merely become
        UNOBSERVED (no neighbor could vote) keep their gaussian untouched.
        """
        if increments is not None:
            for kf in graph.window:
                dd = increments.dd.get(kf.id)
                if dd is not None and dd.shape != kf.disparity.shape:
                    raise ValueError("increments do not match graph dimensions")
        report = SiadReport()
        doomed: list[int] = []
        for kf in sorted(graph.window, key=lambda k: k.id):
            prev = kf.prev_mask
            if prev is None:
                continue
            cur_valid = kf.mask.valid & kf.disparity.valid
            prev_valid = prev.valid
            owned = self._index.get(kf.id, {})
            if owned:
                pix = np.array(list(owned.keys()), dtype=np.int64)
                rows = np.array(list(owned.values()), dtype=np.int64)
                pv, pu = pix[:, 0], pix[:, 1]
                was = prev_valid[pv, pu]
                now = cur_valid[pv, pu]
                if enable_prune:
                    from .graph import Reason

                    unobserved = kf.mask.reason[pv, pu] == int(Reason.UNOBSERVED)
                    dead = was & ~now & ~unobserved
                    doomed.extend(rows[dead].tolist())
                    report.pruned += int(dead.sum())
                live = was & now
                if live.any():
                    world = _world_points(kf, K)
                    self.means[rows[live]] = world[pv[live], pu[live]]
                    report.updated += int(live.sum())
        if enable_prune:
            self._remove_rows(doomed)

        if not enable_spawn:
            return report
        for kf in sorted(graph.window, key=lambda k: k.id):
            prev = kf.prev_mask
            if prev is None:
                continue
            cur_valid = kf.mask.valid & kf.disparity.valid
            prev_valid = prev.valid
            h, w = cur_valid.shape
            stride = self.config.stride
            grid = np.zeros((h, w), dtype=bool)
            grid[::stride, ::stride] = True
            owned = self._index.get(kf.id, {})
            steady = grid & cur_valid & prev_valid
            for v, u in zip(*np.nonzero(steady)):
                if (int(v), int(u)) not in owned:
                    raise MapConsistencyError(
                        f"keyframe {kf.id} pixel ({u}, {v}) stayed valid but has no gaussian"
                    )
            fresh = grid & cur_valid & ~prev_valid
            pv, pu = np.nonzero(fresh)
            unclaimed = np.array(
                [(int(v), int(u)) not in owned for v, u in zip(pv, pu)], dtype=bool
            ) if pv.size else np.zeros(0, dtype=bool)
            report.spawned += self._spawn_batch(kf, K, pv[unclaimed], pu[unclaimed])
        return report

    def check_links(self, graph: FactorGraph):
        """Invariant sweep: no live gaussian may sit on an affirmatively
        invalid pixel (UNOBSERVED pixels are tolerated: no evidence, no
        prune). Call right after siad_apply, before further state changes.
        """
        from .graph import Reason

        for kf_id, table in self._index.items():
            kf = graph.keyframe(kf_id)
            ok = (
                (kf.mask.valid | (kf.mask.reason == int(Reason.UNOBSERVED)))
                & kf.disparity.valid
            )
            for (v, u) in table:
                if not ok[v, u]:
                    raise MapConsistencyError(
                        f"live gaussian on invalid pixel ({u}, {v}) of keyframe {kf_id}"
                    )

    def recomputed_mean(self, kf: Keyframe, v: int, u: int, K: Intrinsics):
        """World position implied by the keyframe's current pose and disparity."""
        return _world_points(kf, K)[v, u]
