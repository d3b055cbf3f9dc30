import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from topogan.errors import DataError, ParameterError
from topogan.postproc import PostprocConfig, gaussian_kernel, gaussian_smooth, postprocess, threshold

images = arrays(np.float64, st.tuples(st.integers(3, 12), st.integers(3, 12)),
                elements=st.floats(0, 1, allow_nan=False))


def _direct_smooth(image, size, sigma):
    """Unseparated 2-D correlation against an explicitly built kernel."""
    r = size // 2
    w = np.array([[np.exp(-(i * i + j * j) / (2 * sigma ** 2)) for j in range(-r, r + 1)] for i in range(-r, r + 1)])
    w /= w.sum()
    p = np.pad(image, r, mode="symmetric")
    out = np.zeros_like(image)
    for y in range(image.shape[0]):
        for x in range(image.shape[1]):
            out[y, x] = np.sum(p[y: y + size, x: x + size] * w)
    return out


class TestThreshold:
    def test_reference_examples(self):
        np.testing.assert_array_equal(threshold(np.array([[0.7, 0.3]])), [[1.0, 0.0]])

    def test_tie_goes_to_one(self):
        assert np.all(threshold(np.full((4, 4), 0.5), 0.5) == 1)

    @given(images)
    def test_idempotent_and_binary(self, img):
        once = threshold(img)
        assert set(np.unique(once)) <= {0.0, 1.0}
        np.testing.assert_array_equal(threshold(once), once)

    def test_rejects_nan(self):
        with pytest.raises(DataError):
            threshold(np.array([[np.nan, 0.2]]))


class TestSmooth:
    @pytest.mark.parametrize("size,sigma", [(5, 1.0), (3, 0.7), (7, 2.5), (1, 1.0)])
    def test_kernel_normalised(self, size, sigma):
        assert abs(gaussian_kernel(size, sigma).sum() - 1.0) <= 1e-12

    def test_constant_fixed_point(self):
        img = np.full((9, 7), 0.37)
        np.testing.assert_array_equal(gaussian_smooth(img), img)

    def test_impulse_reads_back_kernel(self):
        img = np.zeros((21, 21))
        img[10, 10] = 1.0
        out = gaussian_smooth(img, 5, 1.0)
        np.testing.assert_allclose(out[8:13, 8:13], gaussian_kernel(5, 1.0), atol=1e-15)
        assert np.all(np.delete(np.delete(out, range(8, 13), 0), range(8, 13), 1) == 0)

    @pytest.mark.parametrize("size,sigma", [(5, 1.0), (3, 0.5), (7, 1.8)])
    def test_matches_direct_loop_with_reflect_border(self, size, sigma):
        img = np.random.default_rng(size).random((8, 11))
        np.testing.assert_allclose(gaussian_smooth(img, size, sigma), _direct_smooth(img, size, sigma), atol=1e-13)

    @given(images)
    @settings(max_examples=50)
    def test_range_contraction(self, img):
        out = gaussian_smooth(img)
        assert out.max() <= img.max() and out.min() >= img.min()

    def test_even_kernel_rejected(self):
        with pytest.raises(ParameterError):
            gaussian_smooth(np.zeros((5, 5)), 4, 1.0)
        with pytest.raises(ParameterError):
            gaussian_smooth(np.zeros((5, 5)), 5, 0.0)


class TestPostprocess:
    def test_config_invariants(self):
        for bad in (dict(kernel_size=4), dict(sigma=-1.0), dict(threshold=1.0), dict(threshold=0.0), dict(border="wrap")):
            with pytest.raises(ParameterError):
                PostprocConfig(**bad)

    def test_constant_high_becomes_solid(self):
        np.testing.assert_array_equal(postprocess(np.full((6, 6), 0.8)), np.ones((6, 6)))

    def test_binary_input_unchanged_for_tiny_sigma(self):
        img = threshold(np.random.default_rng(1).random((10, 10)))
        np.testing.assert_allclose(postprocess(img, PostprocConfig(sigma=1e-3)), img, atol=1e-6)

    def test_threshold_happens_before_smoothing(self):
        # a lone 0.6 pixel survives as a full kernel footprint only if thresholded first
        img = np.zeros((15, 15))
        img[7, 7] = 0.6
        out = postprocess(img)
        np.testing.assert_allclose(out[5:10, 5:10], gaussian_kernel(5, 1.0), atol=1e-15)

    def test_sample_fixture_keeps_mean_density(self):
        yy, xx = np.mgrid[0:32, 0:32]
        blob = 1 / (1 + np.exp(-(8 - np.hypot(yy - 16, xx - 12)) / 2.0))
        blob = 0.9 * blob + 0.05 * np.sin(xx / 3.0) ** 2
        assert abs(postprocess(blob).mean() - blob.mean()) < 0.1
