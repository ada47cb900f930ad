"""Shared test scaffolding: oracle-initialized graphs over the synthetic scene."""

import numpy as np

from flowsplat.geometry import InverseDepthMap, se3_log
from flowsplat.graph import FactorGraph, GraphConfig, Keyframe, ReliabilityMask
from flowsplat.providers import SyntheticFlowProvider
from flowsplat.synthetic import SyntheticScene


def scene_and_provider(size=32, n_frames=8, seed=0, **provider_kw):
    scene = SyntheticScene.default(size, size, seed=seed)
    provider = SyntheticFlowProvider(scene, n_frames, seed=seed, **provider_kw)
    return scene, provider


def graph_from_scene(scene, provider, frame_indices, graph_config=None):
    """Window of keyframes at ground-truth poses and depths."""
    g = FactorGraph(scene.intrinsics, graph_config or GraphConfig())
    h, w = scene.intrinsics.height, scene.intrinsics.width
    for k, fi in enumerate(frame_indices):
        pose = provider.pose(fi)
        img, depth = scene.render(pose)
        disp = np.where(depth > 0, 1.0 / np.maximum(depth, 1e-12), 0.0)
        kf = Keyframe(
            id=k,
            image=img,
            disparity=InverseDepthMap.from_array(disp),
            pose=pose.copy(),
            mask=ReliabilityMask.all_valid(h, w),
            timestamp=float(fi),
            frame_index=fi,
        )
        g.add_keyframe(kf, provider=provider)
    return g


def pose_error(est, true):
    """Norm of the relative twist between two poses."""
    return float(np.linalg.norm(se3_log(est @ true.inverse())))


def gauge_aligned_pose_errors(graph, true_poses):
    """Per-keyframe relative-pose errors up to the monocular scale gauge.

    Poses are compared relative to keyframe 0 after fitting the single global
    scale that the flow objective cannot observe.
    """
    from flowsplat.geometry import Pose

    ref = graph.window[0]
    rel_est, rel_true = [], []
    for kf in graph.window[1:]:
        rel_est.append(kf.pose @ ref.pose.inverse())
        rel_true.append(true_poses[kf.id] @ true_poses[ref.id].inverse())
    num = sum(float(e.t @ t.t) for e, t in zip(rel_est, rel_true))
    den = sum(float(t.t @ t.t) for t in rel_true)
    s = num / den if den > 0 else 1.0
    return [
        pose_error(e, Pose(t.q, s * t.t)) for e, t in zip(rel_est, rel_true)
    ]
