import numpy as np
import pytest
from numpy.random import default_rng

from occlufit.metrics import interocular_distance, landmark_mse, masked_rmse


class TestMaskedRmse:
    def test_identical_textures_zero(self):
        a = default_rng(0).normal(size=50)
        assert masked_rmse(a, a) == 0.0

    def test_unmasked_is_plain_rmse(self):
        rng = default_rng(1)
        a = rng.normal(size=40)
        b = rng.normal(size=40)
        assert masked_rmse(a, b) == pytest.approx(
            np.sqrt(np.mean((a - b) ** 2)))

    def test_mask_restricts_pixels(self):
        a = np.array([0.0, 0.0, 0.0, 0.0])
        b = np.array([1.0, 1.0, 5.0, 5.0])
        m = np.array([1.0, 1.0, 0.0, 0.0])
        assert masked_rmse(a, b, m) == pytest.approx(1.0)

    def test_soft_mask_thresholded(self):
        a = np.zeros(2)
        b = np.array([2.0, 10.0])
        m = np.array([0.9, 0.1])
        assert masked_rmse(a, b, m) == pytest.approx(2.0)

    def test_empty_mask_raises(self):
        with pytest.raises(ValueError):
            masked_rmse(np.zeros(3), np.zeros(3), np.zeros(3))

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            masked_rmse(np.zeros(3), np.zeros(4))


class TestInterocularDistance:
    def test_68_point_uses_eye_corners(self):
        pts = np.zeros((68, 2))
        pts[36] = [10.0, 0.0]
        pts[45] = [40.0, 40.0]
        assert interocular_distance(pts.reshape(-1)) == pytest.approx(50.0)

    def test_other_counts_use_max_pairwise(self):
        pts = np.array([[0.0, 0.0], [3.0, 4.0], [1.0, 1.0]])
        assert interocular_distance(pts.reshape(-1)) == pytest.approx(5.0)

    def test_explicit_indices_override(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [9.0, 0.0]])
        assert interocular_distance(pts.reshape(-1),
                                    eye_indices=(0, 1)) == pytest.approx(1.0)

    def test_zero_extent_raises(self):
        with pytest.raises(ValueError):
            interocular_distance(np.zeros(6))


class TestLandmarkMse:
    def test_exact_match_is_zero(self):
        rng = default_rng(2)
        s = rng.uniform(0, 100, 16)
        assert landmark_mse(s, s) == 0.0

    def test_known_displacement(self):
        truth = np.array([[0.0, 0.0], [10.0, 0.0]]).reshape(-1)
        est = np.array([[1.0, 0.0], [10.0, 1.0]]).reshape(-1)
        # inter-ocular = 10, per-point squared errors 1 and 1
        assert landmark_mse(est, truth) == pytest.approx(1.0 / 100.0)

    def test_scale_invariant_normalisation(self):
        rng = default_rng(3)
        truth = rng.uniform(0, 50, 20)
        est = truth + rng.normal(0, 2.0, 20)
        scaled = landmark_mse(3.0 * est, 3.0 * truth)
        assert scaled == pytest.approx(landmark_mse(est, truth))

    def test_count_mismatch_raises(self):
        with pytest.raises(ValueError):
            landmark_mse(np.zeros(8), np.zeros(10))
