import numpy as np
import pytest
from numpy.random import default_rng

from occlufit import geometry
from occlufit.geometry import (
    DegenerateShapeError,
    build_reference_frame,
    detect_stretch,
    procrustes_mean,
    render_texture,
    shape_points,
    similarity_align,
    warp_jacobian,
    warp_map,
    warp_texture,
)


def grid_shape(nx=4, ny=4, spacing=10.0, jitter=0.0, rng=None):
    xs, ys = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing)
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
    if jitter and rng is not None:
        pts += rng.normal(0, jitter, pts.shape)
    return pts.reshape(-1)


@pytest.fixture(scope="module")
def frame():
    rng = default_rng(0)
    shapes = np.array([grid_shape(jitter=1.0, rng=rng) for _ in range(5)])
    return build_reference_frame(shapes, (40, 40))


class TestSimilarityAlign:
    def test_recovers_known_transform(self):
        rng = default_rng(1)
        src = rng.normal(size=(6, 2))
        theta = 0.7
        rot = np.array([[np.cos(theta), -np.sin(theta)],
                        [np.sin(theta), np.cos(theta)]])
        dst = 2.5 * src @ rot.T + np.array([3.0, -1.0])
        aligned, scale, angle, _ = similarity_align(src, dst)
        np.testing.assert_allclose(aligned, dst, atol=1e-10)
        assert scale == pytest.approx(2.5)
        assert angle == pytest.approx(theta)

    def test_zero_extent_raises(self):
        with pytest.raises(DegenerateShapeError):
            similarity_align(np.zeros((3, 2)), np.ones((3, 2)))


class TestProcrustesMean:
    def test_single_shape_is_itself_normalised(self):
        s = grid_shape()
        mean = shape_points(procrustes_mean([s]))
        aligned, *_ = similarity_align(shape_points(s), mean)
        np.testing.assert_allclose(aligned, mean, atol=1e-8)

    def test_mean_has_unit_rms_radius(self):
        rng = default_rng(2)
        shapes = np.array([grid_shape(jitter=2.0, rng=rng) for _ in range(8)])
        mean = shape_points(procrustes_mean(shapes))
        np.testing.assert_allclose(np.mean(np.sum(mean ** 2, axis=1)), 1.0,
                                   atol=1e-8)

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            procrustes_mean(np.zeros((0, 8)))


class TestBuildReferenceFrame:
    def test_unit_square_two_triangles_full_coverage(self):
        square = np.array([0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0])
        f = build_reference_frame([square], (20, 20))
        assert f.triangles.shape == (2, 3)
        # brute force: every pixel inside the scaled square hull is covered
        pts = shape_points(f.mean_shape)
        lo = np.ceil(pts.min(axis=0)).astype(int)
        hi = np.floor(pts.max(axis=0)).astype(int)
        interior = f.valid_mask[lo[1]:hi[1] + 1, lo[0]:hi[0] + 1]
        assert interior.all()

    def test_margin_keeps_mean_inside_resolution(self, frame):
        pts = shape_points(frame.mean_shape)
        w, h = frame.resolution
        assert pts[:, 0].min() >= 0.05 * (w - 1) - 1e-6
        assert pts[:, 0].max() <= 0.95 * (w - 1) + 1e-6
        assert pts[:, 1].min() >= 0.05 * (h - 1) - 1e-6
        assert pts[:, 1].max() <= 0.95 * (h - 1) + 1e-6

    def test_triangulation_invariant_to_input_order(self):
        rng = default_rng(3)
        shapes = np.array([grid_shape(jitter=1.0, rng=rng) for _ in range(6)])
        f1 = build_reference_frame(shapes, (30, 30))
        f2 = build_reference_frame(shapes[::-1], (30, 30))
        np.testing.assert_array_equal(f1.triangles, f2.triangles)

    def test_barycentric_partition_of_unity(self, frame):
        bary = frame.pixel_bary[frame.valid_mask]
        assert (bary >= 0).all()
        np.testing.assert_allclose(bary.sum(axis=1), 1.0, atol=1e-6)

    def test_collinear_landmarks_raise(self):
        line = np.array([0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0])
        with pytest.raises(DegenerateShapeError):
            build_reference_frame([line], (10, 10))


class TestWarpTexture:
    def test_identity_warp_is_exact(self, frame):
        rng = default_rng(4)
        img = rng.uniform(0, 255, (40, 40))
        tex = warp_texture(img, frame.mean_shape, frame)
        np.testing.assert_allclose(tex, frame.from_image(img), atol=1e-6)

    def test_constant_image_gives_constant_texture(self, frame):
        img = np.full((40, 40), 7.5)
        s = frame.mean_shape + default_rng(5).normal(0, 1.0,
                                                     frame.mean_shape.shape)
        tex = warp_texture(img, s, frame)
        np.testing.assert_array_equal(tex, np.full(frame.n_valid, 7.5))

    def test_round_trip_on_smooth_gradient(self, frame):
        xs, ys = np.meshgrid(np.arange(40), np.arange(40))
        img = 100.0 + 50.0 * np.sin(xs / 9.0) + 40.0 * np.cos(ys / 7.0)
        rng = default_rng(6)
        s = frame.mean_shape + rng.normal(0, 1.5, frame.mean_shape.shape)
        tex = frame.from_image(img)
        img_s = render_texture(tex, s, frame, (40, 40))
        back = warp_texture(img_s, s, frame)
        # a ones-texture round trip marks pixels whose bilinear support
        # stays inside the rendered region
        cov = render_texture(np.ones(frame.n_valid), s, frame, (40, 40))
        sel = warp_texture(cov, s, frame) > 0.999
        assert sel.mean() > 0.8
        rmse = np.sqrt(np.mean((back[sel] - tex[sel]) ** 2))
        assert rmse < 0.5

    def test_linearity_in_intensities(self, frame):
        rng = default_rng(7)
        i1 = rng.uniform(0, 255, (40, 40))
        i2 = rng.uniform(0, 255, (40, 40))
        s = frame.mean_shape + rng.normal(0, 1.0, frame.mean_shape.shape)
        lhs = warp_texture(2.0 * i1 + 0.5 * i2, s, frame)
        rhs = 2.0 * warp_texture(i1, s, frame) + 0.5 * warp_texture(i2, s, frame)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_all_landmarks_outside_raises(self, frame):
        img = np.zeros((40, 40))
        s = frame.mean_shape + 500.0
        with pytest.raises(ValueError):
            warp_texture(img, s, frame)

    def test_point_count_mismatch(self, frame):
        with pytest.raises(ValueError):
            warp_texture(np.zeros((40, 40)), np.zeros(6), frame)


class TestDetectStretch:
    def test_identity_p_one_mask_all_ones(self, frame):
        rep = detect_stretch(frame.mean_shape, frame)
        covered = rep.N > 0
        np.testing.assert_allclose(rep.p[covered], 1.0)
        np.testing.assert_array_equal(rep.stretch_mask,
                                      np.ones(frame.n_valid))

    def test_p_is_exact_ratio(self, frame):
        rng = default_rng(8)
        s = frame.mean_shape + rng.normal(0, 2.0, frame.mean_shape.shape)
        rep = detect_stretch(s, frame)
        covered = rep.N > 0
        np.testing.assert_array_equal(rep.p[covered],
                                      rep.n0[covered] / rep.N[covered])

    def test_collapsed_source_region_is_masked(self, frame):
        # compress the left half of the shape 4x toward its centroid
        pts = shape_points(frame.mean_shape).copy()
        left = pts[:, 0] < np.median(pts[:, 0])
        centre = pts[left].mean(axis=0)
        pts[left] = centre + (pts[left] - centre) / 4.0
        rep = detect_stretch(pts.reshape(-1), frame)
        left_tris = np.array([left[t].all() for t in frame.triangles])
        flagged = rep.p < 0.9
        assert flagged[left_tris & (rep.N > 0)].all()
        assert (rep.stretch_mask == 0).any()

    def test_translation_leaves_p_unchanged(self, frame):
        # rounding is monotone per axis, so translations cannot collide
        pts = shape_points(frame.mean_shape) + np.array([5.3, -3.7])
        rep0 = detect_stretch(frame.mean_shape, frame)
        rep1 = detect_stretch(pts.reshape(-1), frame)
        covered = rep0.N > 0
        np.testing.assert_array_equal(rep1.p[covered], rep0.p[covered])

    def test_rotation_stays_above_threshold(self, frame):
        # rotations collide a few percent of rounded pixels; the 0.9
        # threshold leaves room so no triangle is falsely flagged
        pts = shape_points(frame.mean_shape)
        theta = 0.3
        rot = np.array([[np.cos(theta), -np.sin(theta)],
                        [np.sin(theta), np.cos(theta)]])
        moved = pts @ rot.T + np.array([5.0, -3.0])
        rep = detect_stretch(moved.reshape(-1), frame)
        covered = rep.N > 0
        assert rep.p[covered].min() > 0.9
        np.testing.assert_array_equal(rep.stretch_mask,
                                      np.ones(frame.n_valid))

    def test_threshold_validation(self, frame):
        with pytest.raises(ValueError):
            detect_stretch(frame.mean_shape, frame, threshold=0.0)
        with pytest.raises(ValueError):
            detect_stretch(frame.mean_shape, frame, threshold=1.5)


class TestWarpJacobian:
    def test_partition_of_unity_rows(self, frame):
        jac = warp_jacobian(frame)
        x_cols = jac[:, 0, 0::2]
        y_cols = jac[:, 1, 1::2]
        np.testing.assert_allclose(x_cols.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(y_cols.sum(axis=1), 1.0, atol=1e-6)
        # x positions do not depend on y coordinates and vice versa
        assert np.all(jac[:, 0, 1::2] == 0)
        assert np.all(jac[:, 1, 0::2] == 0)

    def test_pixel_at_vertex_has_unit_weight(self, frame):
        pts = shape_points(frame.mean_shape)
        jac = warp_jacobian(frame)
        valid = frame.valid_mask
        coords = np.stack(np.meshgrid(np.arange(frame.resolution[0]),
                                      np.arange(frame.resolution[1])),
                          axis=-1)[valid]
        for v, pt in enumerate(pts):
            hit = np.flatnonzero((np.abs(coords[:, 0] - pt[0]) < 1e-9)
                                 & (np.abs(coords[:, 1] - pt[1]) < 1e-9))
            for i in hit:
                assert jac[i, 0, 2 * v] == pytest.approx(1.0, abs=1e-9)
                assert jac[i, 1, 2 * v + 1] == pytest.approx(1.0, abs=1e-9)

    def test_matches_finite_differences(self, frame):
        jac = warp_jacobian(frame)
        base = warp_map(frame.mean_shape, frame).source_coords
        rng = default_rng(9)
        for j in rng.choice(2 * frame.n_points, size=5, replace=False):
            eps = 1e-3
            s = frame.mean_shape.copy()
            s[j] += eps
            moved = warp_map(s, frame).source_coords
            fd = (moved - base) / eps
            np.testing.assert_allclose(fd, jac[:, :, j], atol=1e-6)


class TestRenderTexture:
    def test_identity_render_reproduces_texture(self, frame):
        rng = default_rng(10)
        xs, ys = np.meshgrid(np.arange(40), np.arange(40))
        img = 100.0 + 30.0 * np.sin(xs / 8.0) * np.cos(ys / 6.0)
        tex = frame.from_image(img)
        out = render_texture(tex, frame.mean_shape, frame, (40, 40))
        got = out[frame.valid_mask]
        rmse = np.sqrt(np.mean((got - tex) ** 2))
        assert rmse < 0.5

    def test_background_fill(self, frame):
        tex = np.full(frame.n_valid, 9.0)
        out = render_texture(tex, frame.mean_shape, frame, (40, 40),
                             background=-1.0)
        assert (out == -1.0).any()
        assert (np.abs(out[frame.valid_mask] - 9.0) < 1e-6).mean() > 0.9
