import numpy as np
import pytest

from flowsplat.fileio import (
    FileFormatError,
    export_map,
    import_map,
    load_config_text,
    load_image,
    load_tum_trajectory,
    read_flow_records,
    save_config_text,
    save_image,
    save_tum_trajectory,
    write_flow_records,
)
from flowsplat.geometry import Pose, se3_exp
from flowsplat.splats import GaussianMap, MapConfig


class TestImages:
    def test_16bit_ppm_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.uniform(size=(12, 10, 3))
        p = tmp_path / "t.ppm"
        save_image(p, img, bits=16)
        back = load_image(p)
        assert np.abs(back - img).max() <= 1.0 / 65535

    def test_8bit_ppm_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.uniform(size=(7, 9, 3))
        p = tmp_path / "t.ppm"
        save_image(p, img, bits=8)
        back = load_image(p)
        assert np.abs(back - img).max() <= 1.0 / 255 / 2 + 1e-9

    def test_png_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        img = rng.uniform(size=(8, 8, 3))
        p = tmp_path / "t.png"
        save_image(p, img)
        back = load_image(p)
        assert np.abs(back - img).max() <= 1.0 / 255 / 2 + 1e-9

    def test_quantized_image_roundtrips_exactly(self, tmp_path):
        img = np.round(np.random.default_rng(3).uniform(size=(6, 6, 3)) * 65535) / 65535
        p = tmp_path / "q.ppm"
        save_image(p, img, bits=16)
        assert np.array_equal(load_image(p), img)

    def test_unknown_extension(self, tmp_path):
        with pytest.raises(FileFormatError):
            save_image(tmp_path / "t.bmp", np.zeros((4, 4, 3)))


class TestTrajectory:
    def test_text_roundtrip_bit_equal(self, tmp_path):
        rng = np.random.default_rng(4)
        entries = [
            (float(k), se3_exp(rng.normal(0, 0.4, 6)))
            for k in range(6)
        ]
        p1 = tmp_path / "a.txt"
        p2 = tmp_path / "b.txt"
        save_tum_trajectory(p1, entries)
        loaded = load_tum_trajectory(p1)
        save_tum_trajectory(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_documented_line_parses(self, tmp_path):
        p = tmp_path / "t.txt"
        p.write_text("0.0 1 2 3 0 0 0 1\n")
        entries = load_tum_trajectory(p)
        assert len(entries) == 1
        ts, pose = entries[0]
        assert ts == 0.0
        assert np.allclose(pose.t, [1, 2, 3])
        assert np.allclose(pose.R, np.eye(3))

    def test_malformed_line_reports_number(self, tmp_path):
        p = tmp_path / "bad.txt"
        p.write_text("0.0 1 2 3 0 0 0 1\n0.1 nope\n")
        with pytest.raises(FileFormatError, match=":2:"):
            load_tum_trajectory(p)

    def test_comments_skipped(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("# header\n0.0 0 0 0 0 0 0 1\n\n")
        assert len(load_tum_trajectory(p)) == 1


class TestConfig:
    def test_roundtrip(self, tmp_path):
        vals = {"alpha": "0.5", "n": "12", "mode": "smooth"}
        p = tmp_path / "c.cfg"
        save_config_text(p, vals)
        assert load_config_text(p) == vals

    def test_malformed_line(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("a = 1\nnot a pair\n")
        with pytest.raises(FileFormatError, match=":2:"):
            load_config_text(p)


class TestFlowRecords:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        records = {}
        for key in [(0, 1), (0, 2), (1, 2)]:
            flow = rng.normal(size=(6, 8, 2)).astype(np.float32).astype(np.float64)
            wts = rng.uniform(size=(6, 8, 2)).astype(np.float32).astype(np.float64)
            records[key] = (flow, wts)
        p = tmp_path / "flows.bin"
        write_flow_records(p, records)
        back = read_flow_records(p)
        assert set(back) == set(records)
        for key in records:
            assert np.array_equal(back[key][0], records[key][0])
            assert np.array_equal(back[key][1], records[key][1])

    def test_truncated_file_detected(self, tmp_path):
        p = tmp_path / "flows.bin"
        write_flow_records(p, {(0, 1): (np.zeros((4, 4, 2)), np.ones((4, 4, 2)))})
        data = p.read_bytes()
        p.write_bytes(data[:-8])
        with pytest.raises(FileFormatError):
            read_flow_records(p)


class TestMapExport:
    def test_roundtrip(self, tmp_path):
        from flowsplat.geometry import Intrinsics, InverseDepthMap
        from flowsplat.graph import Keyframe, ReliabilityMask

        K = Intrinsics(fx=20, fy=20, cx=8, cy=8, width=16, height=16)
        kf = Keyframe(
            id=0, image=np.full((16, 16, 3), 0.4),
            disparity=InverseDepthMap.from_array(np.full((16, 16), 0.5)),
            pose=Pose.identity(), mask=ReliabilityMask.all_valid(16, 16),
            timestamp=0.0, frame_index=0,
        )
        m = GaussianMap(MapConfig(stride=4))
        m.densify_stride_grid(kf, K)
        p = tmp_path / "map.bin"
        export_map(p, m)
        mu, q, s, a, c = import_map(p)
        assert mu.shape == (16, 3)
        assert np.allclose(mu, m.means, atol=1e-6)
        assert np.allclose(a, m.opacities, atol=1e-7)
        sidecar = (tmp_path / "map.bin.txt").read_text()
        assert "gaussians 16" in sidecar
        assert "live 16" in sidecar

    def test_bad_size_detected(self, tmp_path):
        p = tmp_path / "map.bin"
        p.write_bytes(b"\x00" * 13)
        with pytest.raises(FileFormatError):
            import_map(p)
