import numpy as np
import pytest

from visray.camera import Camera, DepthPlaneMap, FrustumGrid, plane_depth, project_many
from visray.volume import (
    FeatureMap,
    VolumeGrid,
    bilinear_many,
    bilinear_many_grad,
    bilinear_sample,
    build_frustum_points,
    load_volume,
    save_volume,
    sweep_features,
    trilinear_many,
    trilinear_many_grad,
    trilinear_sample,
    variance_fuse,
    variance_fuse_grad,
)


def identity_camera(width=8, height=8, fx=4.0, fy=4.0, cx=None, cy=None):
    return Camera(
        fx=fx, fy=fy,
        cx=(width - 1) / 2 if cx is None else cx,
        cy=(height - 1) / 2 if cy is None else cy,
        width=width, height=height,
        rotation=np.eye(3), translation=np.zeros(3),
    )


class TestBilinear:
    def test_node_value(self):
        rng = np.random.default_rng(0)
        data = rng.standard_normal((5, 6, 3))
        np.testing.assert_allclose(bilinear_sample(FeatureMap(data), 2.0, 3.0), data[3, 2])

    def test_four_corner_mean(self):
        fmap = FeatureMap(np.array([[0.0, 1.0], [2.0, 3.0]])[..., None])
        assert bilinear_sample(fmap, 0.5, 0.5)[0] == pytest.approx(1.5)

    def test_clamping(self):
        fmap = FeatureMap(np.array([[0.0, 1.0], [2.0, 3.0]])[..., None])
        assert bilinear_sample(fmap, -5.0, -5.0)[0] == 0.0
        assert bilinear_sample(fmap, 9.0, 9.0)[0] == 3.0

    def test_preserves_constants(self):
        fmap = FeatureMap(np.full((4, 4, 2), 2.5))
        rng = np.random.default_rng(1)
        u = rng.uniform(-1, 5, 40)
        v = rng.uniform(-1, 5, 40)
        np.testing.assert_allclose(bilinear_many(fmap.data, u, v), 2.5)

    def test_output_within_data_range(self):
        rng = np.random.default_rng(2)
        data = rng.standard_normal((6, 7, 1))
        u = rng.uniform(-2, 9, 100)
        v = rng.uniform(-2, 9, 100)
        out = bilinear_many(data, u, v)
        assert out.min() >= data.min() - 1e-12 and out.max() <= data.max() + 1e-12


class TestTrilinear:
    def test_node_value(self):
        rng = np.random.default_rng(3)
        data = rng.standard_normal((4, 5, 6, 2))
        np.testing.assert_allclose(trilinear_sample(VolumeGrid(data), 2.0, 3.0, 4.0), data[3, 2, 4])

    def test_eight_corner_mean(self):
        # value = 4h + 2w + d
        data = np.zeros((2, 2, 2, 1))
        for h in range(2):
            for w in range(2):
                for d in range(2):
                    data[h, w, d, 0] = 4 * h + 2 * w + d
        assert trilinear_sample(VolumeGrid(data), 0.5, 0.5, 0.5)[0] == pytest.approx(3.5)

    def test_constant(self):
        vol = VolumeGrid(np.full((3, 3, 3, 1), -1.25))
        rng = np.random.default_rng(4)
        for _ in range(20):
            out = trilinear_sample(vol, rng.uniform(-1, 4), rng.uniform(-1, 4), rng.uniform(-1, 4))
            assert out[0] == pytest.approx(-1.25)


class TestSamplerGradients:
    def test_zero_upstream(self):
        data = np.random.default_rng(5).standard_normal((4, 4, 2))
        g, du, dv = bilinear_many_grad(data, 1.3, 2.2, np.zeros(2))
        assert np.all(g == 0) and du == 0 and dv == 0

    def test_node_scatter(self):
        data = np.zeros((4, 4, 1))
        g, _, _ = bilinear_many_grad(data, 2.0, 1.0, np.ones(1))
        expect = np.zeros((4, 4, 1))
        expect[1, 2, 0] = 1.0
        np.testing.assert_allclose(g, expect)

    def test_bilinear_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        h = 1e-6
        for _ in range(100):
            data = rng.standard_normal((4, 4, 3))
            u = rng.uniform(0.1, 2.9)
            v = rng.uniform(0.1, 2.9)
            if abs(u - round(u)) < 1e-3 or abs(v - round(v)) < 1e-3:
                continue
            up = rng.standard_normal(3)
            g, du, dv = bilinear_many_grad(data, u, v, up)
            # coordinate gradients
            num_u = (bilinear_many(data, u + h, v) - bilinear_many(data, u - h, v)) / (2 * h)
            num_v = (bilinear_many(data, u, v + h) - bilinear_many(data, u, v - h)) / (2 * h)
            assert abs(float(num_u @ up) - du) / (abs(du) + 1e-9) < 1e-4
            assert abs(float(num_v @ up) - dv) / (abs(dv) + 1e-9) < 1e-4
            # data gradient at one random entry
            i, j, c = rng.integers(0, 4), rng.integers(0, 4), rng.integers(0, 3)
            bump = np.zeros_like(data)
            bump[i, j, c] = h
            num_d = (bilinear_many(data + bump, u, v) - bilinear_many(data - bump, u, v)) / (2 * h)
            assert abs(float(num_d @ up) - g[i, j, c]) < 1e-6 + 1e-4 * abs(g[i, j, c])

    def test_trilinear_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        h = 1e-6
        checked = 0
        while checked < 100:
            data = rng.standard_normal((4, 4, 4, 2))
            u, v, d = rng.uniform(0.1, 2.9, 3)
            if min(abs(x - round(x)) for x in (u, v, d)) < 1e-3:
                continue
            up = rng.standard_normal(2)
            _, du, dv, dd = trilinear_many_grad(data, u, v, d, up)
            for coord, grad in (("u", du), ("v", dv), ("d", dd)):
                args = {"u": [u + h, v, d], "v": [u, v + h, d], "d": [u, v, d + h]}[coord]
                argsm = {"u": [u - h, v, d], "v": [u, v - h, d], "d": [u, v, d - h]}[coord]
                num = (trilinear_many(data, *args) - trilinear_many(data, *argsm)) / (2 * h)
                assert abs(float(num @ up) - grad) / (abs(grad) + 1e-9) < 1e-4
            checked += 1

    def test_clamped_coordinate_gradient_is_zero(self):
        data = np.random.default_rng(8).standard_normal((4, 4, 1))
        _, du, dv = bilinear_many_grad(data, -2.0, 2.2, np.ones(1))
        assert du == 0.0


class TestLayoutContract:
    def test_flat_index_formula(self):
        H, W, D, C = 2, 3, 4, 2
        data = np.arange(H * W * D * C, dtype=np.float64).reshape(H, W, D, C)
        vol = VolumeGrid(data)
        flat = vol.data.reshape(-1)
        for h in range(H):
            for w in range(W):
                for d in range(D):
                    for c in range(C):
                        assert flat[((h * W + w) * D + d) * C + c] == data[h, w, d, c]

    def test_vgrd_golden_bytes(self, tmp_path):
        data = np.arange(8, dtype=np.float32).reshape(1, 2, 2, 2)
        p = tmp_path / "tiny.vgrd"
        save_volume(p, VolumeGrid(data))
        blob = p.read_bytes()
        assert blob[:4] == b"VGRD"
        assert blob[4:20] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little") * 3
        assert blob[20:] == data.tobytes()

    def test_vgrd_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        vol = VolumeGrid(rng.standard_normal((3, 4, 5, 2)).astype(np.float32))
        p = tmp_path / "vol.vgrd"
        save_volume(p, vol)
        back = load_volume(p)
        np.testing.assert_array_equal(back.data, vol.data)

    def test_vgrd_bad_magic(self, tmp_path):
        p = tmp_path / "bad.vgrd"
        p.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ValueError, match="magic"):
            load_volume(p)


class TestFrustumPoints:
    def test_identity_camera_depths(self):
        cam = identity_camera(width=8, height=8)
        grid = FrustumGrid(cam, DepthPlaneMap(2.0, 6.0, 4), grid_w=4, grid_h=4)
        pts = build_frustum_points(grid)
        for d in range(4):
            np.testing.assert_allclose(pts[..., d, 2], plane_depth(grid.planes, d))

    def test_points_reproject_inside_frustum(self):
        rng = np.random.default_rng(10)
        cam = identity_camera(width=16, height=12, fx=10, fy=10)
        grid = FrustumGrid(cam, DepthPlaneMap(1.0, 5.0, 6), grid_w=4, grid_h=3)
        pts = build_frustum_points(grid)
        _, _, z, valid = project_many(cam, pts)
        assert np.all(valid)
        assert z.min() >= 1.0 - 1e-9 and z.max() <= 5.0 + 1e-9


class TestSweep:
    def test_constant_map(self):
        cam = identity_camera()
        grid = FrustumGrid(cam, DepthPlaneMap(2.0, 6.0, 4), grid_w=4, grid_h=4)
        pts = build_frustum_points(grid)
        fmap = FeatureMap(np.full((4, 4, 2), 7.0))
        feats, valid = sweep_features(pts, [(cam, fmap)])
        assert np.all(valid)
        np.testing.assert_allclose(feats[0], 7.0)

    def test_behind_camera_zeroed(self):
        cam = identity_camera()
        # a camera facing the opposite direction sees none of the frustum
        flipped = Camera(fx=4, fy=4, cx=3.5, cy=3.5, width=8, height=8,
                         rotation=np.diag([1.0, -1.0, -1.0]), translation=np.zeros(3))
        grid = FrustumGrid(cam, DepthPlaneMap(2.0, 6.0, 4), grid_w=4, grid_h=4)
        pts = build_frustum_points(grid)
        fmap = FeatureMap(np.full((4, 4, 1), 3.0))
        feats, valid = sweep_features(pts, [(flipped, fmap)])
        assert not valid.any()
        np.testing.assert_array_equal(feats, 0.0)

    def test_two_view_hand_composition(self):
        rng = np.random.default_rng(11)
        cam = identity_camera()
        other = Camera(fx=5, fy=5, cx=3.5, cy=3.5, width=8, height=8,
                       rotation=np.eye(3), translation=np.array([0.1, -0.2, 0.3]))
        grid = FrustumGrid(cam, DepthPlaneMap(2.0, 6.0, 3), grid_w=4, grid_h=4)
        pts = build_frustum_points(grid)
        maps = [FeatureMap(rng.standard_normal((5, 6, 2))), FeatureMap(rng.standard_normal((3, 4, 2)))]
        feats, valid = sweep_features(pts, list(zip([cam, other], maps)))
        # check one voxel by explicit composition
        p = pts[2, 1, 1]
        for i, (c, m) in enumerate(zip([cam, other], maps)):
            u, v, z, ok = project_many(c, p[None])
            mh, mw, _ = m.data.shape
            mu = (u + 0.5) * (mw / c.width) - 0.5
            mv = (v + 0.5) * (mh / c.height) - 0.5
            expect = bilinear_many(m.data, mu, mv)[0]
            np.testing.assert_allclose(feats[i, 2, 1, 1], expect, rtol=1e-12)


class TestVarianceFuse:
    def test_identical_views_zero(self):
        feats = np.tile(np.random.default_rng(12).standard_normal((1, 2, 2, 3, 4)), (3, 1, 1, 1, 1))
        valid = np.ones(feats.shape[:4], dtype=bool)
        fused, ok = variance_fuse(feats, valid)
        np.testing.assert_allclose(fused.data, 0.0, atol=1e-12)
        assert ok.all()

    def test_population_variance(self):
        feats = np.zeros((2, 1, 1, 1, 1))
        feats[1] = 2.0
        valid = np.ones((2, 1, 1, 1), dtype=bool)
        fused, _ = variance_fuse(feats, valid)
        assert fused.data[0, 0, 0, 0] == pytest.approx(1.0)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(13)
        feats = rng.standard_normal((4, 2, 2, 2, 3))
        valid = rng.uniform(size=(4, 2, 2, 2)) > 0.3
        a, _ = variance_fuse(feats, valid)
        perm = [2, 0, 3, 1]
        b, _ = variance_fuse(feats[perm], valid[perm])
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    def test_nonnegative_and_single_view_invalid(self):
        feats = np.random.default_rng(14).standard_normal((2, 1, 1, 2, 1))
        valid = np.array([[[[True, True]]], [[[False, True]]]])
        fused, ok = variance_fuse(feats, valid)
        assert fused.data.min() >= 0
        assert not ok[0, 0, 0] and ok[0, 0, 1]
        assert fused.data[0, 0, 0, 0] == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            variance_fuse(np.zeros((2, 2, 2, 2, 1)), np.ones((2, 2, 2, 3), dtype=bool))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(15)
        h = 1e-6
        for include_mean in (False, True):
            feats = rng.standard_normal((3, 2, 2, 2, 2))
            valid = np.ones(feats.shape[:4], dtype=bool)
            valid[2, 0] = False
            up = rng.standard_normal((2, 2, 2, 2 * (2 if include_mean else 1)))
            grad = variance_fuse_grad(feats, valid, up, include_mean=include_mean)
            for _ in range(20):
                i = tuple(rng.integers(0, s) for s in feats.shape)
                bump = np.zeros_like(feats)
                bump[i] = h
                fp, _ = variance_fuse(feats + bump, valid, include_mean=include_mean)
                fm, _ = variance_fuse(feats - bump, valid, include_mean=include_mean)
                num = float(np.sum((fp.data - fm.data) / (2 * h) * up))
                assert abs(num - grad[i]) < 1e-6 + 1e-4 * abs(grad[i])
