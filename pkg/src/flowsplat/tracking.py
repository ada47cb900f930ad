"""Confidence-weighted Gauss-Newton over the flow objective.

The solver minimizes the weighted, Huber-robustified discrepancy between
observed flows and flows induced by the current window poses and disparities.
Per-pixel depth variables are eliminated with a Schur complement (their
Hessian block is diagonal); the reduced pose system is solved densely, and
depth increments are recovered by back substitution.

The first window keyframe is the gauge and never moves. Levenberg damping
with an accept/reject loop guards the plain Gauss-Newton step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import flow_jacobians_dense, induced_flow, se3_exp, se3_log
from .graph import FactorGraph, update_masks


class SolverStallError(RuntimeError):
    """Reduced pose system stayed singular at maximum damping."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class SolverConfig:
    iterations: int = 4  # Gauss-Newton steps per batch
    lm_lambda: float = 1e-4  # initial Levenberg damping
    huber_delta: float = 1.0  # px on the weighted residual norm; inf = plain L2
    stride: int = 4  # solve depth on every stride-th pixel
    max_retries: int = 5  # damping doublings before giving up on a step
    d_min: float = 1e-4  # disparity floor after updates

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lm_lambda <= 0:
            raise ValueError("damping must be positive")


@dataclass
class TrackIncrements:
    """Per-keyframe increments from one batch, consumed by map maintenance.

    ``dxi[k]`` is the twist that left-multiplies the world-from-camera pose
    (``W_after = exp(dxi) @ W_before``); ``dd[k]`` is the additive disparity
    change at full resolution.
    """

    dxi: dict[int, np.ndarray] = field(default_factory=dict)
    dd: dict[int, np.ndarray] = field(default_factory=dict)
    cost_history: list[float] = field(default_factory=list)
    stalled: bool = False


def _grid_mask(h, w, stride):
    m = np.zeros((h, w), dtype=bool)
    m[::stride, ::stride] = True
    return m


def _edge_residuals(graph: FactorGraph, edge, grid):
    """Residuals and weights for one edge at solver-grid pixels.

    Returns (pix_v, pix_u, r, W) with r = flow_obs - induced - correction.
    """
    kf_i = graph.keyframe(edge.i)
    T_ij = graph.relative_pose(edge.i, edge.j)
    f = induced_flow(T_ij, kf_i.disparity, graph.intrinsics)
    usable = (
        grid
        & kf_i.mask.valid
        & kf_i.disparity.valid
        & f.valid
        & (edge.weights.max(axis=-1) > 0)
    )
    pv, pu = np.nonzero(usable)
    r = edge.flow_obs[pv, pu] - f.flow[pv, pu] - edge.correction[pv, pu]
    W = edge.weights[pv, pu]
    return pv, pu, r, W


def residuals(graph: FactorGraph, stride: int = 1):
    """Per-edge weighted flow residuals at solver-grid pixels.

    Returns ``{(i, j): (pixels_v, pixels_u, r, W)}`` skipping invalid pixels.
    """
    if not graph.edges:
        raise ValueError("graph has no edges")
    h, w = graph.intrinsics.height, graph.intrinsics.width
    grid = _grid_mask(h, w, stride)
    return {key: _edge_residuals(graph, e, grid) for key, e in sorted(graph.edges.items())}


def _huber_terms(r, W, delta):
    """(rho-cost, per-component IRLS weights) for stacked residuals."""
    e2 = (W * r * r).sum(axis=1)
    e = np.sqrt(np.maximum(e2, 0.0))
    if np.isinf(delta):
        cost = 0.5 * e2
        kappa = np.ones_like(e)
    else:
        small = e <= delta
        cost = np.where(small, 0.5 * e2, delta * (e - 0.5 * delta))
        with np.errstate(divide="ignore", invalid="ignore"):
            kappa = np.where(small, 1.0, delta / np.maximum(e, 1e-30))
    return cost, kappa[:, None] * W


def weighted_cost(graph: FactorGraph, cfg: SolverConfig) -> float:
    """Total robustified cost at the current state."""
    total = 0.0
    h, w = graph.intrinsics.height, graph.intrinsics.width
    grid = _grid_mask(h, w, cfg.stride)
    for _, edge in sorted(graph.edges.items()):
        _, _, r, W = _edge_residuals(graph, edge, grid)
        cost, _ = _huber_terms(r, W, cfg.huber_delta)
        total += float(cost.sum())
    return total


class _System:
    """Assembled normal equations for one linearization point."""

    def __init__(self, graph: FactorGraph, cfg: SolverConfig):
        self.graph = graph
        self.cfg = cfg
        self.kf_ids = [kf.id for kf in graph.window]
        self.slot = {kf_id: s for s, kf_id in enumerate(self.kf_ids)}
        n = len(self.kf_ids)
        h, w = graph.intrinsics.height, graph.intrinsics.width
        grid = _grid_mask(h, w, cfg.stride)

        # depth variable layout: per keyframe, its valid grid pixels
        self.dvar_index = {}  # kf_id -> (H, W) int map, -1 where not a variable
        self.dvar_pixels = {}  # kf_id -> (pv, pu)
        offset = 0
        for kf in graph.window:
            sel = grid & kf.disparity.valid
            pv, pu = np.nonzero(sel)
            idx = np.full((h, w), -1, dtype=np.int64)
            idx[pv, pu] = offset + np.arange(pv.size)
            self.dvar_index[kf.id] = idx
            self.dvar_pixels[kf.id] = (pv, pu)
            offset += pv.size
        self.n_depth = offset

        self.B = np.zeros((6 * n, 6 * n))
        self.E = np.zeros((6 * n, self.n_depth))
        self.C = np.zeros(self.n_depth)
        self.g_pose = np.zeros(6 * n)
        self.g_depth = np.zeros(self.n_depth)
        self.cost = 0.0
        self._assemble(grid)

    def _assemble(self, grid):
        graph, cfg = self.graph, self.cfg
        for _, edge in sorted(graph.edges.items()):
            kf_i = graph.keyframe(edge.i)
            T_ij = graph.relative_pose(edge.i, edge.j)
            J_i, J_j, J_d, reproj_ok = flow_jacobians_dense(
                T_ij, kf_i.disparity, graph.intrinsics
            )
            f = induced_flow(T_ij, kf_i.disparity, graph.intrinsics)
            usable = (
                grid
                & kf_i.mask.valid
                & kf_i.disparity.valid
                & reproj_ok
                & (edge.weights.max(axis=-1) > 0)
            )
            pv, pu = np.nonzero(usable)
            if pv.size == 0:
                continue
            r = edge.flow_obs[pv, pu] - f.flow[pv, pu] - edge.correction[pv, pu]
            W = edge.weights[pv, pu]
            cost, Lam = _huber_terms(r, W, cfg.huber_delta)
            self.cost += float(cost.sum())

            Ji = J_i[pv, pu]  # (M, 2, 6)
            Jj = J_j[pv, pu]
            Jd = J_d[pv, pu]  # (M, 2)
            q = self.dvar_index[edge.i][pv, pu]
            si, sj = self.slot[edge.i], self.slot[edge.j]
            ri, rj = slice(6 * si, 6 * si + 6), slice(6 * sj, 6 * sj + 6)

            LJi = Lam[:, :, None] * Ji
            LJj = Lam[:, :, None] * Jj
            LJd = Lam * Jd
            self.B[ri, ri] += np.einsum("mia,mib->ab", LJi, Ji, optimize=False)
            self.B[rj, rj] += np.einsum("mia,mib->ab", LJj, Jj, optimize=False)
            Bij = np.einsum("mia,mib->ab", LJi, Jj, optimize=False)
            self.B[ri, rj] += Bij
            self.B[rj, ri] += Bij.T
            self.g_pose[ri] += np.einsum("mia,mi->a", LJi, r, optimize=False)
            self.g_pose[rj] += np.einsum("mia,mi->a", LJj, r, optimize=False)

            Ei = np.einsum("mia,mi->ma", LJi, Jd, optimize=False)  # (M, 6)
            Ej = np.einsum("mia,mi->ma", LJj, Jd, optimize=False)
            # q indices are unique within one edge, so fancy += is safe
            self.E[ri, q] += Ei.T
            self.E[rj, q] += Ej.T
            self.C[q] += np.einsum("mi,mi->m", LJd, Jd, optimize=False)
            self.g_depth[q] += np.einsum("mi,mi->m", LJd, r, optimize=False)

    def solve(self, lam: float, dense: bool = False):
        """(delta_pose (6n,), delta_depth (D,)) at damping ``lam``.

        The gauge block (first keyframe) is excluded from the solve and its
        increment is zero. ``dense=True`` solves the full joint system instead
        of the Schur-reduced one (for verification).
        """
        n = len(self.kf_ids)
        free = np.arange(6, 6 * n)  # keyframe 0 fixed
        Cd = self.C + lam
        Bd = self.B + lam * np.eye(6 * n)
        if dense:
            size = 6 * n + self.n_depth
            H = np.zeros((size, size))
            H[: 6 * n, : 6 * n] = Bd
            H[: 6 * n, 6 * n :] = self.E
            H[6 * n :, : 6 * n] = self.E.T
            H[6 * n :, 6 * n :] = np.diag(Cd)
            g = np.concatenate([self.g_pose, self.g_depth])
            keep = np.concatenate([free, 6 * n + np.arange(self.n_depth)])
            sol = np.linalg.solve(H[np.ix_(keep, keep)], g[keep])
            dp = np.zeros(6 * n)
            dp[free] = sol[: free.size]
            return dp, sol[free.size :]
        EinvC = self.E / Cd[None, :]
        S = Bd - _ordered_gemm(EinvC, self.E.T)
        rhs = self.g_pose - EinvC @ self.g_depth
        dp = np.zeros(6 * n)
        dp[free] = np.linalg.solve(S[np.ix_(free, free)], rhs[free])
        dd = (self.g_depth - self.E.T @ dp) / Cd
        return dp, dd


def _ordered_gemm(A, B, chunk=512):
    """A @ B accumulated over fixed-size column chunks of A.

    Keeps the reduction order independent of BLAS threading so seeded runs
    stay bit-identical across thread counts.
    """
    out = np.zeros((A.shape[0], B.shape[1]))
    for s in range(0, A.shape[1], chunk):
        out += A[:, s : s + chunk] @ B[s : s + chunk, :]
    return out


def _apply_step(graph: FactorGraph, system: _System, dp, dd, cfg: SolverConfig):
    """Apply pose/depth increments; returns an undo closure."""
    saved = []
    for kf in graph.window:
        saved.append((kf, kf.pose, kf.disparity.disparity.copy(), kf.disparity.valid.copy()))
    stride = cfg.stride
    for kf in graph.window:
        s = system.slot[kf.id]
        xi = dp[6 * s : 6 * s + 6]
        if np.any(xi):
            kf.pose = se3_exp(xi) @ kf.pose
        pv, pu = system.dvar_pixels[kf.id]
        if pv.size == 0:
            continue
        idx = system.dvar_index[kf.id][pv, pu]
        delta_sparse = np.zeros(kf.disparity.shape)
        delta_sparse[pv, pu] = dd[idx]
        if stride > 1:
            # nearest-grid assignment: every pixel takes its grid point's delta
            h, w = kf.disparity.shape
            gy_max = (h - 1) // stride * stride
            gx_max = (w - 1) // stride * stride
            gy = np.clip((np.arange(h) + stride // 2) // stride * stride, 0, gy_max)
            gx = np.clip((np.arange(w) + stride // 2) // stride * stride, 0, gx_max)
            delta = delta_sparse[np.ix_(gy, gx)]
        else:
            delta = delta_sparse
        valid = kf.disparity.valid
        d_new = np.where(valid, np.maximum(kf.disparity.disparity + delta, cfg.d_min),
                         kf.disparity.disparity)
        kf.disparity.disparity = d_new

    def undo():
        for kf, pose, d, v in saved:
            kf.pose = pose
            kf.disparity.disparity = d
            kf.disparity.valid = v

    return undo


def gauss_newton_step(graph: FactorGraph, cfg: SolverConfig, lam: float | None = None):
    """One damped Gauss-Newton step with accept/reject.

    Returns ``(dp, dd_full, cost_before, cost_after, lam)``. On repeated cost
    increase the state is left unchanged (zero step); a singular system at
    maximum damping raises SolverStallError.
    """
    if len(graph.window) < 2:
        raise ValueError("need at least two keyframes")
    lam = cfg.lm_lambda if lam is None else lam
    system = _System(graph, cfg)
    cost_before = system.cost
    solved_once = False
    for _ in range(cfg.max_retries + 1):
        try:
            dp, dd = system.solve(lam)
        except np.linalg.LinAlgError:
            lam *= 2.0
            continue
        if not np.isfinite(dp).all() or not np.isfinite(dd).all():
            lam *= 2.0
            continue
        solved_once = True
        undo = _apply_step(graph, system, dp, dd, cfg)
        cost_after = weighted_cost(graph, cfg)
        if cost_after <= cost_before:
            lam = max(lam * 0.5, 1e-12)
            return dp, dd, cost_before, cost_after, lam
        undo()
        lam *= 2.0
    if not solved_once:
        raise SolverStallError(
            "reduced pose system singular at maximum damping",
            {"lam": lam, "cost": cost_before, "edges": len(graph.edges),
             "depth_vars": system.n_depth},
        )
    # no damping level achieved a non-increasing cost: keep the current state
    return np.zeros_like(system.g_pose), np.zeros(system.n_depth), cost_before, cost_before, lam


def track_batch(graph: FactorGraph, cfg: SolverConfig) -> TrackIncrements:
    """Run ``cfg.iterations`` solver steps, refresh masks, report increments."""
    before_pose = {kf.id: kf.pose for kf in graph.window}
    before_d = {kf.id: kf.disparity.disparity.copy() for kf in graph.window}
    inc = TrackIncrements()
    lam = cfg.lm_lambda
    try:
        for _ in range(cfg.iterations):
            _, _, c0, c1, lam = gauss_newton_step(graph, cfg, lam)
            if not inc.cost_history:
                inc.cost_history.append(c0)
            inc.cost_history.append(c1)
    except SolverStallError:
        inc.stalled = True
        raise
    finally:
        update_masks(graph)
        for kf in graph.window:
            if kf.id not in before_pose:
                continue
            w_before = before_pose[kf.id].inverse()
            w_after = kf.pose.inverse()
            inc.dxi[kf.id] = se3_log(w_after @ w_before.inverse())
            inc.dd[kf.id] = kf.disparity.disparity - before_d[kf.id]
    return inc
