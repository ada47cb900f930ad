"""Sliding-window factor graph: keyframes, co-visibility edges, reliability masks.

Edges are stored once per keyframe pair, directed old -> new; the edge's flow
observation maps pixels of the older (source) frame into the newer one, and
its confidence weights live in the source frame's pixel grid. Masks combine
three per-pixel criteria in fixed precedence: depth consistency, cross-frame
geometric consistency, and confidence weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .geometry import EPS_Z, Intrinsics, InverseDepthMap, Pose, project


class Reason(IntEnum):
    OK = 0
    DEPTH_INCONSISTENT = 1
    GEOM_INCONSISTENT = 2
    LOW_CONFIDENCE = 3
    UNOBSERVED = 4


@dataclass
class ReliabilityMask:
    """Per-pixel validity with a reason code; valid iff reason == OK."""

    reason: np.ndarray  # (H, W) uint8

    @classmethod
    def all_valid(cls, height, width):
        return cls(np.zeros((height, width), dtype=np.uint8))

    @classmethod
    def all_invalid(cls, height, width, reason=Reason.UNOBSERVED):
        return cls(np.full((height, width), int(reason), dtype=np.uint8))

    @property
    def valid(self) -> np.ndarray:
        return self.reason == int(Reason.OK)

    def copy(self):
        return ReliabilityMask(self.reason.copy())


@dataclass
class Keyframe:
    id: int
    image: np.ndarray  # (H, W, 3) in [0, 1]
    disparity: InverseDepthMap
    pose: Pose  # camera-from-world
    mask: ReliabilityMask
    timestamp: float
    frame_index: int = -1  # position in the input stream
    prev_mask: ReliabilityMask | None = None

    def __post_init__(self):
        h, w = self.disparity.shape
        if self.image.shape[:2] != (h, w) or self.mask.reason.shape != (h, w):
            raise ValueError("keyframe image/disparity/mask dimensions disagree")


@dataclass
class EdgeFactor:
    """Co-visibility factor carrying observed flow i->j with per-pixel weights."""

    i: int
    j: int
    flow_obs: np.ndarray  # (H, W, 2)
    correction: np.ndarray  # (H, W, 2), zero unless supplied externally
    weights: np.ndarray  # (H, W, 2), nonnegative

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("self edges are not allowed")
        if not np.isfinite(self.weights).all() or (self.weights < 0).any():
            raise ValueError("weights must be finite and nonnegative")


@dataclass
class GraphConfig:
    window_capacity: int = 25
    tau_kf: float = 2.5  # mean-flow keyframe threshold (px)
    r_edge: int = 3  # index-distance co-visibility rule
    tau_covis: float | None = None  # optional flow-overlap rule, disabled by default
    tau_d: float = 0.05  # relative depth-consistency tolerance
    k_min: int = 1  # consistent neighbors needed for a valid depth
    geom_thresh: float = 0.05  # 3D distance threshold (scene units)
    eps_conf: float = 0.1  # confidence-weight cutoff


class FactorGraph:
    """Ordered keyframe window plus co-visibility edges, capacity-bounded."""

    def __init__(self, intrinsics: Intrinsics, config: GraphConfig | None = None):
        self.intrinsics = intrinsics
        self.config = config or GraphConfig()
        self.window: list[Keyframe] = []
        self.edges: dict[tuple[int, int], EdgeFactor] = {}
        self.retired: list[Keyframe] = []

    def keyframe(self, kf_id: int) -> Keyframe:
        for kf in self.window:
            if kf.id == kf_id:
                return kf
        raise KeyError(f"keyframe {kf_id} not in window")

    def neighbor_ids(self, kf_id: int) -> list[int]:
        out = set()
        for (a, b) in self.edges:
            if a == kf_id:
                out.add(b)
            elif b == kf_id:
                out.add(a)
        return sorted(out)

    def edges_from(self, kf_id: int) -> list[EdgeFactor]:
        return [e for (a, _), e in sorted(self.edges.items()) if a == kf_id]

    def relative_pose(self, i: int, j: int) -> Pose:
        """T_ij mapping camera-i points into camera j."""
        return self.keyframe(j).pose @ self.keyframe(i).pose.inverse()

    def flow_overlap(self, src: Keyframe, dst: Keyframe) -> float:
        """Fraction of src's valid pixels whose reprojection lands inside dst."""
        from .geometry import induced_flow

        T = dst.pose @ src.pose.inverse()
        f = induced_flow(T, src.disparity, self.intrinsics)
        if not src.disparity.valid.any():
            return 0.0
        u, v = self.intrinsics.pixel_grid()
        tu = u + f.flow[..., 0]
        tv = v + f.flow[..., 1]
        inb = (
            f.valid
            & (tu >= 0) & (tu <= self.intrinsics.width - 1)
            & (tv >= 0) & (tv <= self.intrinsics.height - 1)
        )
        return float(inb.sum()) / float(src.disparity.valid.sum())

    def add_keyframe(self, kf: Keyframe, provider=None) -> Keyframe | None:
        """Append a keyframe, wire co-visibility edges, evict if over capacity.

        Returns the evicted keyframe, if any. Edges run old -> new and obtain
        their observations from ``provider`` when one is given.
        """
        partners = []
        for other in self.window:
            linked = kf.id - other.id <= self.config.r_edge
            if not linked and self.config.tau_covis is not None:
                linked = self.flow_overlap(other, kf) >= self.config.tau_covis
            if linked:
                partners.append(other)
        self.window.append(kf)
        for other in partners:
            if provider is not None:
                flow, corr, wts = provider.observe(other.frame_index, kf.frame_index)
            else:
                h, w = kf.disparity.shape
                flow = np.zeros((h, w, 2))
                corr = np.zeros((h, w, 2))
                wts = np.ones((h, w, 2))
            self._add_edge(EdgeFactor(other.id, kf.id, flow, corr, wts))
        evicted = None
        if len(self.window) > self.config.window_capacity:
            evicted = self.window.pop(0)
            self.edges = {
                key: e for key, e in self.edges.items() if evicted.id not in key
            }
            self.retired.append(evicted)
        return evicted

    def _add_edge(self, edge: EdgeFactor):
        key = (edge.i, edge.j)
        if key in self.edges:
            raise ValueError(f"duplicate edge {key}")
        live = {kf.id for kf in self.window}
        if edge.i not in live or edge.j not in live:
            raise ValueError(f"edge {key} endpoint not in window")
        self.edges[key] = edge

    def all_keyframes(self) -> list[Keyframe]:
        """Retired plus windowed keyframes in id order (full trajectory)."""
        return sorted(self.retired + self.window, key=lambda k: k.id)


def motion_filter(candidate_index: int, last_kf: Keyframe | None, provider,
                  tau_kf: float = 2.5) -> bool:
    """Keyframe gate: accept when mean observed flow magnitude >= tau_kf.

    The first frame (no keyframe yet) is always accepted. The mean is taken
    over pixels the provider marks usable (any positive weight); if nothing
    overlaps, the candidate is trivially novel and accepted.
    """
    if last_kf is None:
        return True
    flow, _, weights = provider.observe(last_kf.frame_index, candidate_index)
    usable = weights.max(axis=-1) > 0
    if not usable.any():
        return True
    mag = np.linalg.norm(flow, axis=-1)
    return float(mag[usable].mean()) >= tau_kf


def depth_consistency_mask(graph: FactorGraph, kf_id: int) -> ReliabilityMask:
    """Per-pixel depth consistency against neighboring keyframes.

    A pixel is valid when its disparity is positive and at least ``k_min``
    neighbors observe a matching depth (relative error <= tau_d) at the
    reprojected location, looked up nearest-neighbor. Pixels no neighbor can
    vote on are UNOBSERVED.
    """
    kf = graph.keyframe(kf_id)
    cfg = graph.config
    K = graph.intrinsics
    H, W = kf.disparity.shape
    neighbors = graph.neighbor_ids(kf_id)
    if not neighbors:
        return ReliabilityMask.all_invalid(H, W, Reason.UNOBSERVED)

    rays = K.unit_rays()
    safe_d = np.where(kf.disparity.valid, kf.disparity.disparity, 1.0)
    pts_i = rays / safe_d[..., None]
    votes_ok = np.zeros((H, W), dtype=np.int64)
    votes_possible = np.zeros((H, W), dtype=np.int64)
    d_valid = kf.disparity.valid
    for j in neighbors:
        kf_j = graph.keyframe(j)
        T = graph.relative_pose(kf_id, j)
        pts_j = pts_i @ T.R.T + T.t
        z = pts_j[..., 2]
        front = d_valid & (z > EPS_Z)
        uv = project(np.where(front[..., None], pts_j, np.array([0.0, 0.0, 1.0])), K)
        iu = np.round(uv[..., 0]).astype(int)
        iv = np.round(uv[..., 1]).astype(int)
        inb = front & (iu >= 0) & (iu < W) & (iv >= 0) & (iv < H)
        iu = np.clip(iu, 0, W - 1)
        iv = np.clip(iv, 0, H - 1)
        votable = inb & kf_j.disparity.valid[iv, iu]
        z_seen = np.where(votable, 1.0 / np.maximum(kf_j.disparity.disparity[iv, iu], 1e-12), 1.0)
        rel = np.abs(z - z_seen) / np.maximum(z_seen, 1e-12)
        votes_possible += votable
        votes_ok += votable & (rel <= cfg.tau_d)

    reason = np.full((H, W), int(Reason.DEPTH_INCONSISTENT), dtype=np.uint8)
    reason[(votes_possible == 0) & d_valid] = int(Reason.UNOBSERVED)
    reason[d_valid & (votes_ok >= cfg.k_min)] = int(Reason.OK)
    return ReliabilityMask(reason)


def geometric_consistency_check(graph: FactorGraph, i: int, j: int):
    """3D distances between transformed and re-observed points, frame i vs j.

    Returns ``(dist, tested)``: per-pixel Euclidean distance between
    T_ij x_i and the point back-projected at the corresponding pixel of frame
    j, plus the mask of pixels the test applies to. Out-of-frame reprojections
    and occlusions (transformed point deeper than the surface frame j sees by
    more than the threshold) are excluded.
    """
    if (i, j) not in graph.edges and (j, i) not in graph.edges:
        raise KeyError(f"no edge between keyframes {i} and {j}")
    kf_i, kf_j = graph.keyframe(i), graph.keyframe(j)
    cfg = graph.config
    K = graph.intrinsics
    H, W = kf_i.disparity.shape
    rays = K.unit_rays()
    safe_d = np.where(kf_i.disparity.valid, kf_i.disparity.disparity, 1.0)
    x_i = rays / safe_d[..., None]
    T = graph.relative_pose(i, j)
    x_j = x_i @ T.R.T + T.t
    z = x_j[..., 2]
    front = kf_i.disparity.valid & (z > EPS_Z)
    uv = project(np.where(front[..., None], x_j, np.array([0.0, 0.0, 1.0])), K)
    iu = np.round(uv[..., 0]).astype(int)
    iv = np.round(uv[..., 1]).astype(int)
    inb = front & (iu >= 0) & (iu < W) & (iv >= 0) & (iv < H)
    iu = np.clip(iu, 0, W - 1)
    iv = np.clip(iv, 0, H - 1)
    observed = inb & kf_j.disparity.valid[iv, iu]
    z_hat = np.where(observed, 1.0 / np.maximum(kf_j.disparity.disparity[iv, iu], 1e-12), 1.0)
    x_hat = rays[iv, iu] * z_hat[..., None]
    dist = np.linalg.norm(x_j - x_hat, axis=-1)
    dist[~observed] = 0.0
    # transformed point behind the observed surface -> occluded, not tested
    occluded = observed & (z - z_hat > cfg.geom_thresh)
    tested = observed & ~occluded
    return dist, tested


def confidence_mask_update(graph: FactorGraph, kf_id: int,
                           eps: float | None = None) -> ReliabilityMask:
    """Invalidate pixels whose mean confidence over incident edges is < eps.

    The mean runs over every edge sourced at ``kf_id`` and over both flow
    components. Keyframes without outgoing edges keep all pixels valid here.
    """
    kf = graph.keyframe(kf_id)
    if eps is None:
        eps = graph.config.eps_conf
    H, W = kf.disparity.shape
    out = graph.edges_from(kf_id)
    mask = ReliabilityMask.all_valid(H, W)
    if not out:
        return mask
    mean_w = np.mean([e.weights.mean(axis=-1) for e in out], axis=0)
    mask.reason[mean_w < eps] = int(Reason.LOW_CONFIDENCE)
    return mask


def update_masks(graph: FactorGraph):
    """Recompute every windowed keyframe's mask; the old one moves to prev_mask.

    Criteria apply in documented precedence: depth consistency, then
    geometric consistency, then confidence. The composite is a pure function
    of the graph state, so calling twice without state changes is a no-op.
    """
    new_masks = {}
    for kf in graph.window:
        mask = depth_consistency_mask(graph, kf.id)
        still_ok = mask.valid
        for j in graph.neighbor_ids(kf.id):
            dist, tested = geometric_consistency_check(graph, kf.id, j)
            bad = tested & (dist > graph.config.geom_thresh)
            mask.reason[still_ok & bad] = int(Reason.GEOM_INCONSISTENT)
            still_ok = mask.valid
        conf = confidence_mask_update(graph, kf.id)
        mask.reason[still_ok & ~conf.valid] = int(Reason.LOW_CONFIDENCE)
        new_masks[kf.id] = mask
    for kf in graph.window:
        kf.prev_mask = kf.mask
        kf.mask = new_masks[kf.id]
    return graph
