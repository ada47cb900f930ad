import numpy as np
import pytest

from flowsplat.geometry import Intrinsics
from flowsplat.losses import (
    LossInputError,
    LossValue,
    LossWeights,
    edge_weight,
    gaussian_window,
    geo_loss,
    l1_loss,
    ms_ssim,
    normal_from_depth,
    rgb_loss,
    ssim,
    total_loss,
)


def make_K(w=48, h=48, fx=50.0):
    return Intrinsics(fx=fx, fy=fx, cx=w / 2, cy=h / 2, width=w, height=h)


def rand_image(shape, seed, lo=0.1, hi=0.9):
    rng = np.random.default_rng(seed)
    return rng.uniform(lo, hi, shape)


class TestL1:
    def test_identical_zero(self):
        x = rand_image((16, 16, 3), 0)
        assert l1_loss(x, x).value == 0.0

    def test_constant_difference(self):
        a = np.full((8, 8, 3), 0.25)
        b = np.full((8, 8, 3), 0.75)
        assert l1_loss(a, b).value == pytest.approx(0.5)

    def test_gradient_matches_fd(self):
        x = rand_image((9, 9, 3), 1)
        y = rand_image((9, 9, 3), 2)
        r = l1_loss(x, y)
        rng = np.random.default_rng(3)
        h = 1e-7
        for _ in range(20):
            i, j, c = rng.integers(0, 9), rng.integers(0, 9), rng.integers(0, 3)
            xp = x.copy()
            xp[i, j, c] += h
            xm = x.copy()
            xm[i, j, c] -= h
            fd = (l1_loss(xp, y).value - l1_loss(xm, y).value) / (2 * h)
            assert r.grad_color[i, j, c] == pytest.approx(fd, abs=1e-6)


def brute_force_ssim(x, y, window=11):
    """Independent oracle: direct per-window weighted statistics."""
    w = gaussian_window(window)
    H, W = x.shape
    vals = []
    for r in range(H - window + 1):
        for c in range(W - window + 1):
            px = x[r : r + window, c : c + window]
            py = y[r : r + window, c : c + window]
            mx = (w * px).sum()
            my = (w * py).sum()
            vx = (w * px * px).sum() - mx * mx
            vy = (w * py * py).sum() - my * my
            vxy = (w * px * py).sum() - mx * my
            v = ((2 * mx * my + 0.01**2) * (2 * vxy + 0.03**2)) / (
                (mx * mx + my * my + 0.01**2) * (vx + vy + 0.03**2)
            )
            vals.append(v)
    return float(np.mean(vals))


class TestSsim:
    def test_identical_is_one(self):
        x = rand_image((20, 20, 3), 4)
        assert ssim(x, x).value == pytest.approx(1.0, abs=1e-12)

    def test_negation_matches_brute_force(self):
        x = rand_image((16, 16), 5, lo=0.2, hi=0.8)
        y = 1.0 - x  # 0.5-symmetric negation: covariance term goes negative
        r = ssim(x, y)
        assert r.value < 1.0
        oracle = brute_force_ssim(x, y)
        assert r.value == pytest.approx(oracle, abs=1e-12)

    def test_symmetry(self):
        x = rand_image((18, 18, 3), 6)
        y = rand_image((18, 18, 3), 7)
        assert ssim(x, y).value == pytest.approx(ssim(y, x).value, abs=1e-12)

    def test_undersized_rejected(self):
        with pytest.raises(LossInputError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_gradient_matches_fd(self):
        x = rand_image((14, 14), 8)
        y = rand_image((14, 14), 9)
        r = ssim(x, y)
        rng = np.random.default_rng(10)
        h = 1e-5
        for _ in range(25):
            i, j = rng.integers(0, 14), rng.integers(0, 14)
            xp = x.copy()
            xp[i, j] += h
            xm = x.copy()
            xm[i, j] -= h
            fd = (ssim(xp, y).value - ssim(xm, y).value) / (2 * h)
            denom = max(abs(fd), 1e-3)
            assert abs(r.grad_color[i, j] - fd) / denom < 1e-4

    def test_constant_images_degenerate_to_one(self):
        x = np.full((16, 16), 0.4)
        assert ssim(x, x).value == pytest.approx(1.0)


class TestMsSsim:
    def test_identical_is_one(self):
        x = rand_image((48, 48, 3), 11)
        assert ms_ssim(x, x).value == pytest.approx(1.0, abs=1e-12)

    def test_noise_strictly_decreases(self):
        x = rand_image((48, 48, 3), 12)
        rng = np.random.default_rng(13)
        y = np.clip(x + rng.normal(0, 0.05, x.shape), 0, 1)
        assert ms_ssim(x, y).value < ms_ssim(x, x).value

    def test_constant_inputs_equal_plain_ssim(self):
        x = np.full((48, 48), 0.3)
        y = np.full((48, 48), 0.3)
        assert ms_ssim(x, y).value == pytest.approx(ssim(x, y).value)

    def test_undersized_rejected(self):
        with pytest.raises(LossInputError):
            ms_ssim(np.zeros((40, 40)), np.zeros((40, 40)))

    def test_three_scale_average_structure(self):
        # hand-assembled oracle: ssim at scales {1, 1/2, 1/4} via avg pooling
        from flowsplat.losses import _avg_pool2

        x = rand_image((48, 48), 14)
        y = rand_image((48, 48), 15)
        s0 = ssim(x, y).value
        x1, y1 = _avg_pool2(x), _avg_pool2(y)
        s1 = ssim(x1, y1).value
        x2, y2 = _avg_pool2(x1), _avg_pool2(y1)
        s2 = ssim(x2, y2).value
        assert ms_ssim(x, y).value == pytest.approx((s0 + s1 + s2) / 3.0, abs=1e-12)

    def test_gradient_matches_fd(self):
        x = rand_image((48, 48), 16)
        y = rand_image((48, 48), 17)
        r = ms_ssim(x, y)
        rng = np.random.default_rng(18)
        h = 1e-5
        for _ in range(15):
            i, j = rng.integers(0, 48), rng.integers(0, 48)
            xp = x.copy()
            xp[i, j] += h
            xm = x.copy()
            xm[i, j] -= h
            fd = (ms_ssim(xp, y).value - ms_ssim(xm, y).value) / (2 * h)
            denom = max(abs(fd), 1e-3)
            assert abs(r.grad_color[i, j] - fd) / denom < 1e-4


class TestRgbLoss:
    def test_lambda_zero_is_l1(self):
        x = rand_image((48, 48, 3), 19)
        y = rand_image((48, 48, 3), 20)
        w = LossWeights(lambda_ms_ssim=0.0)
        assert rgb_loss(x, y, w).value == pytest.approx(l1_loss(x, y).value)

    def test_identical_zero_at_lambda_one(self):
        x = rand_image((48, 48, 3), 21)
        w = LossWeights(lambda_ms_ssim=1.0)
        assert rgb_loss(x, x, w).value == pytest.approx(0.0, abs=1e-12)

    def test_convex_combination_oracle(self):
        x = rand_image((48, 48, 3), 22)
        y = rand_image((48, 48, 3), 23)
        w = LossWeights(lambda_ms_ssim=0.2)
        expected = 0.8 * l1_loss(x, y).value + 0.2 * (1.0 - ms_ssim(x, y).value)
        assert rgb_loss(x, y, w).value == pytest.approx(expected, abs=1e-12)


class TestNormalFromDepth:
    def test_frontal_plane_camera_facing(self):
        K = make_K()
        depth = np.full((K.height, K.width), 2.5)
        N, valid = normal_from_depth(depth, K)
        assert valid.all()
        assert np.allclose(N, [0, 0, -1], atol=1e-9)

    def test_tilted_plane_matches_analytic(self):
        # plane y_cam = z_cam - 2 has normal (0, 1, -1)/sqrt(2) facing the camera
        K = make_K()
        _, vgrid = K.pixel_grid()
        yn = (vgrid - K.cy) / K.fy
        depth = 2.0 / (1.0 - yn)
        N, valid = normal_from_depth(depth, K)
        inner = valid[2:-2, 2:-2]
        assert inner.all()
        expect = np.array([0.0, 1.0, -1.0]) / np.sqrt(2)
        err = np.abs(N[2:-2, 2:-2] - expect).max()
        assert err < 1e-2  # finite differences on a curved depth grid

    def test_spike_locality(self):
        K = make_K()
        depth = np.full((K.height, K.width), 2.0)
        N0, _ = normal_from_depth(depth, K)
        depth[20, 20] = 2.5
        N1, _ = normal_from_depth(depth, K)
        changed = np.abs(N1 - N0).max(axis=-1) > 1e-12
        ys, xs = np.nonzero(changed)
        assert changed.any()
        assert np.abs(ys - 20).max() <= 2 and np.abs(xs - 20).max() <= 2

    def test_zero_norm_flagged_invalid(self):
        K = make_K()
        depth = np.zeros((K.height, K.width))
        _, valid = normal_from_depth(depth, K)
        assert not valid.any()


class TestEdgeWeight:
    def test_smooth_peak_at_one(self):
        w = LossWeights(mode="smooth", sigma=0.5)
        assert edge_weight(np.array([1.0]), w)[0] == pytest.approx(1.0)

    def test_smooth_at_sigma_distance(self):
        w = LossWeights(mode="smooth", sigma=0.5)
        assert edge_weight(np.array([0.5]), w)[0] == pytest.approx(np.exp(-1.0))
        w2 = LossWeights(mode="smooth", sigma=0.25)
        assert edge_weight(np.array([0.75]), w2)[0] == pytest.approx(np.exp(-1.0))

    def test_power_q2_at_zero(self):
        w = LossWeights(mode="power", q=2.0)
        assert edge_weight(np.array([0.0]), w)[0] == pytest.approx(1.0)

    def test_smooth_bounded(self):
        w = LossWeights(mode="smooth", sigma=0.5)
        x = np.linspace(0, 1, 101)
        vals = edge_weight(x, w)
        assert (vals > 0).all() and (vals <= 1).all()
        assert vals.max() == pytest.approx(1.0)
        assert (vals < 1).sum() == 100  # attains 1 only at x = 1

    def test_smooth_sigma_monotonicity(self):
        x = np.linspace(0, 0.99, 50)
        w1 = LossWeights(mode="smooth", sigma=0.5)
        w2 = LossWeights(mode="smooth", sigma=1.0)
        assert (edge_weight(x, w2) >= edge_weight(x, w1)).all()


def wavy_depth(K, seed=0, base=2.0, amp=0.15):
    u, v = K.pixel_grid()
    rng = np.random.default_rng(seed)
    ph = rng.uniform(0, np.pi, 4)
    return base + amp * (
        np.sin(2 * np.pi * u / K.width + ph[0]) * np.sin(2 * np.pi * v / K.height + ph[1])
        + 0.5 * np.cos(4 * np.pi * u / K.width + ph[2])
    )


def brute_force_geo(depth, image, K, weights):
    """Independent scalar-loop evaluation of the edge-aware normal penalty."""
    from flowsplat.losses import _diff, _image_gradient_weight

    N, valid = normal_from_depth(depth, K)
    H, W = depth.shape
    omega = _image_gradient_weight(image, weights)
    total = 0.0
    for r in range(H):
        for c in range(W):
            acc = 0.0
            for ch in range(3):
                # same stencil: central interior, one-sided borders
                if 0 < c < W - 1:
                    dx = 0.5 * (N[r, c + 1, ch] - N[r, c - 1, ch])
                    okx = valid[r, c] and valid[r, c - 1] and valid[r, c + 1]
                elif c == 0:
                    dx = N[r, 1, ch] - N[r, 0, ch]
                    okx = valid[r, 0] and valid[r, 1]
                else:
                    dx = N[r, c, ch] - N[r, c - 1, ch]
                    okx = valid[r, c] and valid[r, c - 1]
                if 0 < r < H - 1:
                    dy = 0.5 * (N[r + 1, c, ch] - N[r - 1, c, ch])
                    oky = valid[r, c] and valid[r - 1, c] and valid[r + 1, c]
                elif r == 0:
                    dy = N[1, c, ch] - N[0, c, ch]
                    oky = valid[0, c] and valid[1, c]
                else:
                    dy = N[r, c, ch] - N[r - 1, c, ch]
                    oky = valid[r, c] and valid[r - 1, c]
                if not okx:
                    dx = 0.0
                if not oky:
                    dy = 0.0
                acc += np.sqrt(dx * dx + dy * dy)
            total += (acc / 3.0) * omega[r, c]
    return total / (H * W)


class TestGeoLoss:
    def test_frontal_plane_zero(self):
        K = make_K()
        depth = np.full((K.height, K.width), 2.0)
        img = rand_image((K.height, K.width, 3), 24)
        r = geo_loss(depth, img, K, LossWeights())
        assert r.value == pytest.approx(0.0, abs=1e-15)
        assert np.allclose(r.grad_depth, 0.0)

    def test_depth_step_matches_brute_force(self):
        K = make_K(w=24, h=24)
        depth = np.full((K.height, K.width), 2.0)
        depth[:, 12:] = 2.4  # synthetic depth step
        img = np.full((K.height, K.width, 3), 0.5)
        for mode in ("power", "smooth"):
            w = LossWeights(mode=mode)
            r = geo_loss(depth, img, K, w)
            oracle = brute_force_geo(depth, img, K, w)
            assert r.value == pytest.approx(oracle, abs=1e-12)
        assert r.value > 0

    def test_smooth_sigma_monotone_loss(self):
        K = make_K(w=24, h=24)
        depth = wavy_depth(K, seed=25)
        img = rand_image((K.height, K.width, 3), 26)
        v1 = geo_loss(depth, img, K, LossWeights(mode="smooth", sigma=0.5)).value
        v2 = geo_loss(depth, img, K, LossWeights(mode="smooth", sigma=1.0)).value
        assert v2 >= v1  # weights only grow with sigma for x in [0, 1]

    def test_gradient_matches_fd(self):
        K = make_K(w=20, h=20)
        depth = wavy_depth(K, seed=27)
        img = rand_image((K.height, K.width, 3), 28)
        w = LossWeights(mode="smooth")
        r = geo_loss(depth, img, K, w)
        rng = np.random.default_rng(29)
        h = 1e-5
        for _ in range(30):
            i, j = rng.integers(0, 20), rng.integers(0, 20)
            dp = depth.copy()
            dp[i, j] += h
            dm = depth.copy()
            dm[i, j] -= h
            fd = (geo_loss(dp, img, K, w).value - geo_loss(dm, img, K, w).value) / (2 * h)
            denom = max(abs(fd), 1e-4)
            assert abs(r.grad_depth[i, j] - fd) / denom < 1e-4

    def test_power_mode_gradient_matches_fd(self):
        K = make_K(w=16, h=16)
        depth = wavy_depth(K, seed=30)
        img = rand_image((K.height, K.width, 3), 31)
        w = LossWeights(mode="power", q=2.0)
        r = geo_loss(depth, img, K, w)
        rng = np.random.default_rng(32)
        h = 1e-5
        for _ in range(20):
            i, j = rng.integers(0, 16), rng.integers(0, 16)
            dp = depth.copy()
            dp[i, j] += h
            dm = depth.copy()
            dm[i, j] -= h
            fd = (geo_loss(dp, img, K, w).value - geo_loss(dm, img, K, w).value) / (2 * h)
            denom = max(abs(fd), 1e-4)
            assert abs(r.grad_depth[i, j] - fd) / denom < 1e-4


class _FakeRender:
    def __init__(self, color, depth):
        self.color = color
        self.depth = depth


class TestTotalLoss:
    def test_lambda_geo_zero_equals_rgb(self):
        K = make_K()
        color = rand_image((48, 48, 3), 33)
        target = rand_image((48, 48, 3), 34)
        out = _FakeRender(color, wavy_depth(K, 35))
        w = LossWeights(lambda_geo=0.0)
        assert total_loss(out, target, K, w).value == pytest.approx(
            rgb_loss(color, target, w).value
        )

    def test_perfect_frontal_render_zero(self):
        K = make_K()
        target = rand_image((48, 48, 3), 36)
        out = _FakeRender(target.copy(), np.full((48, 48), 2.0))
        r = total_loss(out, target, K, LossWeights())
        assert r.value == pytest.approx(0.0, abs=1e-12)

    def test_composite_equals_sum_of_parts(self):
        K = make_K()
        color = rand_image((48, 48, 3), 37)
        target = rand_image((48, 48, 3), 38)
        depth = wavy_depth(K, 39)
        w = LossWeights(lambda_ms_ssim=0.2, lambda_geo=0.1)
        r = total_loss(_FakeRender(color, depth), target, K, w)
        expected = rgb_loss(color, target, w).value + 0.1 * geo_loss(depth, target, K, w).value
        assert r.value == pytest.approx(expected, abs=1e-12)
        assert r.grad_color.shape == color.shape
        assert r.grad_depth.shape == depth.shape
