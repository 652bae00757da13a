import numpy as np
import pytest

from helpers import finite_difference_grad_check
from isorec.core import Image2D, RandomSource
from isorec.denoiser import (
    GaussianDataSpec,
    TinyDenoiser,
    TrainConfig,
    TrainingFailure,
    analytic_gaussian_denoiser,
    q_sample,
    train_denoiser,
)


class TestQSample:
    def test_zero_noise(self, schedule1000):
        x0 = Image2D(RandomSource(0, 0).normal((4, 4)))
        zero = Image2D(np.zeros((4, 4)))
        out = q_sample(x0, 700, zero, schedule1000)
        assert np.allclose(out.data, np.sqrt(schedule1000.alpha_bars[700]) * x0.data, atol=1e-15)

    def test_t_zero_returns_input(self, schedule1000):
        x0 = Image2D(RandomSource(1, 0).normal((4, 4)))
        noise = Image2D(RandomSource(2, 0).normal((4, 4)))
        assert np.array_equal(q_sample(x0, 0, noise, schedule1000).data, x0.data)

    def test_moment_oracle(self, schedule1000):
        x0 = np.full((4, 4), 0.5)
        t = 500
        ab = schedule1000.alpha_bars[t]
        draws = RandomSource(3, 0).normal((100_000, 4, 4))
        samples = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * draws
        n = draws.shape[0]
        mean_band = 3.0 * np.sqrt(1 - ab) / np.sqrt(n)
        var_band = 3.0 * (1 - ab) * np.sqrt(2.0 / (n - 1))
        assert np.all(np.abs(samples.mean(axis=0) - np.sqrt(ab) * x0) < mean_band)
        assert np.all(np.abs(samples.var(axis=0, ddof=1) - (1 - ab)) < var_band)

    def test_shape_mismatch(self, schedule1000):
        with pytest.raises(ValueError):
            q_sample(Image2D(np.zeros((2, 2))), 1, Image2D(np.zeros((3, 2))), schedule1000)

    def test_t_out_of_range(self, schedule1000):
        img = Image2D(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            q_sample(img, 1001, img, schedule1000)


class TestAnalyticGaussianDenoiser:
    def test_standard_normal_data_closed_form(self, schedule1000):
        model = analytic_gaussian_denoiser(GaussianDataSpec(mean=np.zeros((3, 3)), variance=np.ones((3, 3))))
        x_t = Image2D(RandomSource(4, 0).normal((3, 3)))
        for t in (1, 250, 999):
            ab = schedule1000.alpha_bars[t]
            got = model.predict_noise(x_t, t, schedule1000)
            assert np.allclose(got.data, np.sqrt(1 - ab) * x_t.data, atol=1e-12)

    def test_point_mass_limit(self, schedule1000):
        m = np.full((2, 2), 0.3)
        model = analytic_gaussian_denoiser(GaussianDataSpec(mean=m, variance=np.full((2, 2), 1e-18)))
        x_t = Image2D(RandomSource(5, 0).normal((2, 2)))
        t = 400
        ab = schedule1000.alpha_bars[t]
        expected = (x_t.data - np.sqrt(ab) * m) / np.sqrt(1 - ab)
        assert np.allclose(model.predict_noise(x_t, t, schedule1000).data, expected, atol=1e-8)

    def test_full_covariance_against_quadrature(self, schedule1000):
        cov = np.array([[1.0, 0.9], [0.9, 1.0]])
        mean = np.array([0.2, -0.4])
        model = analytic_gaussian_denoiser(GaussianDataSpec(mean=mean, covariance=cov))
        x_t = Image2D(np.array([[0.7, -1.1]]))
        t = 600
        ab = schedule1000.alpha_bars[t]

        grid = np.linspace(-8.0, 8.0, 801)
        g0, g1 = np.meshgrid(grid, grid, indexing="ij")
        pts = np.stack([g0.ravel(), g1.ravel()], axis=1)
        prec = np.linalg.inv(cov)
        diff = pts - mean
        log_prior = -0.5 * np.einsum("ni,ij,nj->n", diff, prec, diff)
        resid = x_t.data.reshape(2) - np.sqrt(ab) * pts
        log_like = -0.5 * (resid**2).sum(axis=1) / (1 - ab)
        w = np.exp(log_prior + log_like - (log_prior + log_like).max())
        post_mean = (pts * w[:, None]).sum(axis=0) / w.sum()
        expected = (x_t.data.reshape(2) - np.sqrt(ab) * post_mean) / np.sqrt(1 - ab)

        got = model.predict_noise(x_t, t, schedule1000).data.reshape(2)
        assert np.allclose(got, expected, atol=1e-3)

    def test_diagonal_full_consistency(self, schedule1000):
        rng = RandomSource(6, 0)
        var = np.abs(rng.normal((3, 4))) + 0.2
        mean = rng.normal((3, 4))
        diag_model = analytic_gaussian_denoiser(GaussianDataSpec(mean=mean, variance=var))
        full_model = analytic_gaussian_denoiser(
            GaussianDataSpec(mean=mean.reshape(-1), covariance=np.diag(var.reshape(-1)))
        )
        x_t = Image2D(rng.normal((3, 4)))
        for t in (5, 500, 1000):
            a = diag_model.predict_noise(x_t, t, schedule1000).data
            b = full_model.predict_noise(x_t, t, schedule1000).data
            assert np.allclose(a, b, atol=1e-10)

    def test_rejects_t_zero(self, schedule1000):
        model = analytic_gaussian_denoiser(GaussianDataSpec(mean=np.zeros((2, 2)), variance=np.ones((2, 2))))
        with pytest.raises(ValueError):
            model.predict_noise(Image2D(np.zeros((2, 2))), 0, schedule1000)

    def test_optimality_against_baselines(self, schedule1000):
        rng = RandomSource(7, 0)
        mean = np.full((4, 4), 0.1)
        var = np.full((4, 4), 0.4)
        model = analytic_gaussian_denoiser(GaussianDataSpec(mean=mean, variance=var))
        fresh = TinyDenoiser.create(channels=8, blocks=1, emb_dim=8, rng=RandomSource(8, 0), zero_init_output=False)
        t = 350
        ab = schedule1000.alpha_bars[t]
        n = 10_000
        x0 = mean + np.sqrt(var) * rng.normal((n, 4, 4))
        eps = rng.normal((n, 4, 4))
        x_t = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps

        gain = np.sqrt(ab) * var / (ab * var + (1 - ab))
        analytic_pred = (x_t - np.sqrt(ab) * (mean + gain * (x_t - np.sqrt(ab) * mean))) / np.sqrt(1 - ab)
        mse_analytic = np.mean((analytic_pred - eps) ** 2)
        mse_zero = np.mean(eps**2)
        tiny_pred, _ = fresh.forward_batch(x_t, np.full(n, float(t)))
        mse_tiny = np.mean((tiny_pred - eps) ** 2)
        assert mse_analytic <= mse_zero
        assert mse_analytic <= mse_tiny

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            GaussianDataSpec(mean=np.zeros(2))
        with pytest.raises(ValueError):
            GaussianDataSpec(mean=np.zeros(2), variance=np.array([1.0, -1.0]))
        with pytest.raises(ValueError):
            GaussianDataSpec(mean=np.zeros(2), covariance=np.array([[1.0, 2.0], [2.0, 1.0]]))
        with pytest.raises(ValueError):
            GaussianDataSpec(mean=np.zeros(300), covariance=np.eye(300))

    def test_output_shape_matches_input(self, schedule1000):
        rng = RandomSource(9, 0)
        for shape in ((1, 1), (3, 7), (8, 2)):
            spec = GaussianDataSpec(mean=np.zeros(shape), variance=np.ones(shape))
            model = analytic_gaussian_denoiser(spec)
            out = model.predict_noise(Image2D(rng.normal(shape)), 100, schedule1000)
            assert out.shape == shape


class TestTinyDenoiser:
    def test_output_shape_matches_input(self, schedule1000):
        model = TinyDenoiser.create(channels=4, blocks=1, emb_dim=8, rng=RandomSource(10, 0))
        for shape in ((6, 6), (9, 5), (16, 12)):
            out = model.predict_noise(Image2D(RandomSource(11, 0).normal(shape)), 300, schedule1000)
            assert out.shape == shape

    def test_zero_initialized_model_predicts_zero(self, schedule1000):
        model = TinyDenoiser.create(channels=8, blocks=2, emb_dim=16, rng=RandomSource(12, 0))
        out = model.predict_noise(Image2D(RandomSource(13, 0).normal((8, 8))), 500, schedule1000)
        assert np.all(out.data == 0.0)

    def test_initial_loss_near_one(self):
        model = TinyDenoiser.create(channels=8, blocks=2, emb_dim=16, rng=RandomSource(14, 0))
        rng = RandomSource(15, 0)
        x_t = rng.normal((16, 8, 8))
        eps = rng.normal((16, 8, 8))
        loss, _ = model.loss_and_grads(x_t, np.full(16, 400.0), eps)
        assert 0.9 <= loss <= 1.1

    def test_gradient_check_small(self):
        model = TinyDenoiser.create(
            channels=4, blocks=1, emb_dim=8, rng=RandomSource(16, 0),
            zero_init_output=False, dtype=np.float64,
        )
        worst = finite_difference_grad_check(model, height=6, width=6)
        assert worst < 1e-4

    def test_forward_deterministic(self, schedule1000):
        model = TinyDenoiser.create(channels=8, blocks=2, emb_dim=16, rng=RandomSource(17, 0), zero_init_output=False)
        x = Image2D(RandomSource(18, 0).normal((8, 8)))
        a = model.predict_noise(x, 200, schedule1000)
        b = model.predict_noise(x, 200, schedule1000)
        assert np.array_equal(a.data, b.data)

    def test_invalid_architecture(self):
        with pytest.raises(ValueError):
            TinyDenoiser.create(channels=0)
        with pytest.raises(ValueError):
            TinyDenoiser.create(emb_dim=7)


class TestTraining:
    def _dataset(self, n=8, shape=(8, 8), seed=20):
        rng = RandomSource(seed, 0)
        return [Image2D(np.tanh(rng.normal(shape))) for _ in range(n)]

    def test_loss_trace_deterministic(self, schedule1000):
        traces = []
        for _ in range(2):
            model = TinyDenoiser.create(channels=4, blocks=1, emb_dim=8, rng=RandomSource(21, 0))
            cfg = TrainConfig(batch_size=4, steps=30, learning_rate=0.05, seed=9)
            _, losses = train_denoiser(model, self._dataset(), schedule1000, cfg)
            traces.append(losses)
        assert traces[0] == traces[1]

    def test_prefix_of_longer_run_matches(self, schedule1000):
        model_a = TinyDenoiser.create(channels=4, blocks=1, emb_dim=8, rng=RandomSource(21, 0))
        _, long_trace = train_denoiser(
            model_a, self._dataset(), schedule1000, TrainConfig(batch_size=4, steps=40, learning_rate=0.05, seed=9)
        )
        model_b = TinyDenoiser.create(channels=4, blocks=1, emb_dim=8, rng=RandomSource(21, 0))
        _, short_trace = train_denoiser(
            model_b, self._dataset(), schedule1000, TrainConfig(batch_size=4, steps=15, learning_rate=0.05, seed=9)
        )
        assert long_trace[:15] == short_trace

    def test_empty_dataset(self, schedule1000):
        model = TinyDenoiser.create(channels=4, blocks=1, emb_dim=8)
        with pytest.raises(TrainingFailure) as err:
            train_denoiser(model, [], schedule1000, TrainConfig())
        assert err.value.step == 0

    def test_divergence_reports_step(self, schedule1000):
        model = TinyDenoiser.create(channels=4, blocks=1, emb_dim=8, rng=RandomSource(22, 0))
        cfg = TrainConfig(batch_size=4, steps=200, learning_rate=1e12, seed=1)
        with pytest.raises(TrainingFailure) as err:
            train_denoiser(model, self._dataset(), schedule1000, cfg)
        assert 0 <= err.value.step < 200

    def test_metadata_recorded(self, schedule1000):
        model = TinyDenoiser.create(channels=4, blocks=1, emb_dim=8, rng=RandomSource(23, 0))
        cfg = TrainConfig(batch_size=4, steps=10, learning_rate=0.05, seed=2, dataset_id="toy")
        model, losses = train_denoiser(model, self._dataset(), schedule1000, cfg)
        assert model.metadata["optimizer"] == "sgd-momentum"
        assert model.metadata["dataset"] == "toy"
        assert model.metadata["final_loss"] == losses[-1]
        assert model.schedule_id == schedule1000.describe()

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            TrainConfig(momentum=1.0)
