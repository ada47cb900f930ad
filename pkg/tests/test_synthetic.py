import numpy as np

from flowsplat.geometry import induced_flow
from flowsplat.synthetic import SyntheticScene, look_at


class TestScene:
    def test_render_covers_frame(self):
        scene = SyntheticScene.default(48, 48, seed=0)
        for t in (0.0, 0.5, 1.0):
            img, depth = scene.render(scene.pose_at(t))
            assert (depth > 0).all(), "room shell must close the frustum"
            assert img.min() >= 0.0 and img.max() <= 1.0
            assert img.std() > 0.02, "texture should not be flat"

    def test_depth_range_sane(self):
        scene = SyntheticScene.default(48, 48, seed=0)
        _, depth = scene.render(scene.pose_at(0.3))
        assert depth.min() > 0.3
        assert depth.max() < 12.0

    def test_multi_view_color_consistency(self):
        # the same 3D point must read the same texture color from two views
        scene = SyntheticScene.default(64, 64, seed=0)
        p0, p1 = scene.pose_at(0.4), scene.pose_at(0.45)
        img0, d0 = scene.render(p0)
        img1, _ = scene.render(p1)
        flow, vis = scene.flow_pair(p0, p1)
        u, v = scene.intrinsics.pixel_grid()
        tu = np.round(u + flow[..., 0]).astype(int)
        tv = np.round(v + flow[..., 1]).astype(int)
        m = vis & (tu >= 0) & (tu < 64) & (tv >= 0) & (tv < 64)
        diff = np.abs(img0[m] - img1[tv[m], tu[m]]).mean()
        assert diff < 0.06  # nearest-pixel resampling leaves small residue

    def test_flow_matches_reprojection_identity(self):
        # with zero noise the generated flow equals the induced flow exactly
        scene = SyntheticScene.default(48, 48, seed=1)
        p_i, p_j = scene.pose_at(0.2), scene.pose_at(0.3)
        flow, vis = scene.flow_pair(p_i, p_j)
        d_i = scene.disparity(p_i)
        T_ij = p_j @ p_i.inverse()
        f = induced_flow(T_ij, d_i, scene.intrinsics)
        m = vis & f.valid
        assert m.mean() > 0.6
        assert np.abs(flow[m] - f.flow[m]).max() < 1e-9

    def test_trajectory_is_smooth(self):
        scene = SyntheticScene.default(32, 32, seed=0)
        poses = scene.trajectory(16)
        steps = [
            np.linalg.norm((poses[k + 1] @ poses[k].inverse()).t)
            for k in range(15)
        ]
        assert max(steps) < 0.3
        assert min(steps) > 1e-4

    def test_look_at_points_camera_at_target(self):
        P = look_at([1.0, -0.5, 0.0], [0.0, 0.3, 2.8])
        Xc = P.apply([0.0, 0.3, 2.8])
        assert np.allclose(Xc[:2], 0, atol=1e-12)
        assert Xc[2] > 0
