import numpy as np
import pytest

from isorec.synth import (
    ar1_covariance,
    blobs_volume,
    gaussian_columns_volume,
    make_volume,
    stripes_volume,
)


class TestDeterminism:
    @pytest.mark.parametrize("kind", ["stripes", "blobs", "gauss-columns"])
    def test_same_seed_reproduces(self, kind):
        a = make_volume(kind, (8, 8, 8), seed=5)
        b = make_volume(kind, (8, 8, 8), seed=5)
        assert np.array_equal(a.data, b.data)

    @pytest.mark.parametrize("kind", ["stripes", "blobs", "gauss-columns"])
    def test_different_seeds_differ(self, kind):
        a = make_volume(kind, (8, 8, 8), seed=5)
        b = make_volume(kind, (8, 8, 8), seed=6)
        assert not np.array_equal(a.data, b.data)

    def test_dims_respected(self):
        vol = make_volume("stripes", (4, 6, 8), seed=0)
        assert vol.shape == (4, 6, 8)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            make_volume("plaid", (4, 4, 4), seed=0)


class TestStripes:
    def test_autocorrelation_shows_period(self):
        period = 8
        vol = stripes_volume((8, 8, 64), seed=3, period=float(period), direction=np.array([0.0, 0.0, 1.0]))
        x = vol.data - vol.data.mean()
        var = (x * x).mean()

        def lag_corr(lag):
            return (x[:, :, :-lag] * x[:, :, lag:]).mean() / var

        assert lag_corr(period) > 0.9
        assert lag_corr(period // 2) < -0.9

    def test_amplitude_bounded(self):
        vol = stripes_volume((16, 16, 16), seed=1)
        assert np.abs(vol.data).max() <= 0.9 + 1e-12

    def test_bad_params(self):
        with pytest.raises(ValueError):
            stripes_volume((4, 4, 4), seed=0, period=0.0)
        with pytest.raises(ValueError):
            stripes_volume((4, 4, 4), seed=0, n_waves=0)


class TestBlobs:
    def test_range_strictly_inside_canonical(self):
        vol = blobs_volume((12, 12, 12), seed=2)
        assert np.abs(vol.data).max() < 1.0

    def test_has_structure(self):
        vol = blobs_volume((12, 12, 12), seed=2)
        assert vol.data.std() > 0.01


class TestGaussianColumns:
    def test_ar1_covariance_shape(self):
        cov = ar1_covariance(4, 0.9)
        expected = np.array(
            [
                [1.0, 0.9, 0.81, 0.729],
                [0.9, 1.0, 0.9, 0.81],
                [0.81, 0.9, 1.0, 0.9],
                [0.729, 0.81, 0.9, 1.0],
            ]
        )
        assert np.allclose(cov, expected, atol=1e-12)
        assert np.all(np.linalg.eigvalsh(cov) > 0)

    def test_sample_moments(self):
        vol = gaussian_columns_volume((16, 64, 64), seed=4, rho=0.9)
        x = vol.data
        assert abs(x.var() - 1.0) < 0.05
        lag1 = (x[:-1] * x[1:]).mean()
        assert abs(lag1 - 0.9) < 0.05
        assert abs((x[0] * x[2:3]).mean()) < 1.0  # finite sanity

    def test_bad_rho(self):
        with pytest.raises(ValueError):
            gaussian_columns_volume((4, 4, 4), seed=0, rho=1.0)
        with pytest.raises(ValueError):
            ar1_covariance(4, -0.1)
