import numpy as np
import pytest

from scenediff.diffusion import (
    DiffusionConfig,
    GaussianWorldOracle,
    SamplerDivergenceError,
    heun_sample,
    masked_mse,
    perturb,
    precondition,
    sample_train_taus,
    score_from_denoiser,
    sigma_grid,
    training_loss,
)


@pytest.fixture(scope="module")
def config():
    return DiffusionConfig()


class TestConfig:
    def test_defaults(self, config):
        assert config.sigma_data == 0.5
        assert config.rho == 7.0
        assert config.sigma_min == 0.002
        assert config.sigma_max == 80.0
        assert config.num_steps == 50
        assert config.p_train_mean == -1.2
        assert config.p_train_std == 1.2

    def test_validation(self):
        with pytest.raises(ValueError):
            DiffusionConfig(sigma_min=1.0, sigma_max=0.5)
        with pytest.raises(ValueError):
            DiffusionConfig(num_steps=1)
        with pytest.raises(ValueError):
            DiffusionConfig(rho=0.0)


class TestPrecondition:
    def test_hand_values_at_half(self):
        co = precondition(0.5, sigma_data=0.5)
        assert co.c_skip == pytest.approx(0.5, abs=1e-12)
        assert co.c_out == pytest.approx(0.3535533905932738, abs=1e-12)
        assert co.c_in == pytest.approx(1.4142135623730951, abs=1e-12)
        assert co.c_noise == pytest.approx(-0.17328679513998632, abs=1e-12)

    def test_small_tau_limits(self):
        co = precondition(1e-9, sigma_data=0.5)
        assert co.c_skip == pytest.approx(1.0, abs=1e-12)
        assert co.c_out == pytest.approx(0.0, abs=1e-9)

    def test_symmetry_point(self):
        co = precondition(0.5, sigma_data=0.5)
        assert co.c_skip == pytest.approx(0.5)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            precondition(0.0)
        with pytest.raises(ValueError):
            precondition(-1.0)

    def test_formulas_and_unit_variance_identity(self):
        sd = 0.5
        taus = np.logspace(np.log10(0.002), np.log10(80.0), 1000)
        co = precondition(taus, sigma_data=sd)
        denom = taus**2 + sd**2
        assert np.allclose(co.c_skip, sd**2 / denom, rtol=1e-12, atol=0)
        assert np.allclose(co.c_out, taus * sd / np.sqrt(denom), rtol=1e-12, atol=0)
        assert np.allclose(co.c_in, 1.0 / np.sqrt(denom), rtol=1e-12, atol=0)
        assert np.allclose(co.c_noise, 0.25 * np.log(taus), rtol=1e-12, atol=0)
        assert np.allclose(co.c_in**2 * denom, 1.0, rtol=1e-12, atol=0)


class TestPerturb:
    def test_tau_zero_identity(self, rng):
        x = rng.normal(size=(2, 3, 4, 3))
        mask = np.ones((2, 3, 4), bool)
        out = perturb(x, mask, 0.0, rng)
        assert np.array_equal(out, x)

    def test_fully_observed_unchanged(self, rng):
        x = rng.normal(size=(2, 3, 4, 3))
        out = perturb(x, np.zeros((2, 3, 4), bool), 5.0, rng)
        assert np.array_equal(out, x)

    def test_negative_tau_rejected(self, rng):
        with pytest.raises(ValueError):
            perturb(np.zeros((1, 1, 1, 3)), np.ones((1, 1, 1), bool), -0.1, rng)

    def test_monte_carlo_std(self):
        g = np.random.default_rng(77)
        n = 100_000
        x0 = np.zeros((n, 1, 1, 3))
        mask = np.ones((n, 1, 1), bool)
        for tau in (0.1, 1.0, 10.0):
            noisy = perturb(x0, mask, tau, g)
            emp = (noisy - x0).std()
            assert abs(emp - tau) / tau < 0.01


class TestScore:
    def test_zero_when_d_equals_x(self, rng):
        x = rng.normal(size=(4, 3))
        assert np.array_equal(score_from_denoiser(x, x, 1.3), np.zeros_like(x))

    def test_linearity(self, rng):
        x = rng.normal(size=(4, 3))
        tau = 0.7
        s = score_from_denoiser(x + tau**2, x, tau)
        assert np.allclose(s, 1.0, atol=1e-12)

    def test_gaussian_oracle_consistency(self, rng):
        oracle = GaussianWorldOracle(0.5)
        x = rng.normal(size=(8, 3))
        for tau in (0.05, 0.5, 3.0):
            analytic = -x / (0.25 + tau**2)
            via_denoiser = score_from_denoiser(oracle(x, tau), x, tau)
            assert np.abs(via_denoiser - analytic).max() < 1e-9

    def test_rejects_nonpositive_tau(self):
        with pytest.raises(ValueError):
            score_from_denoiser(np.zeros(3), np.zeros(3), 0.0)


class TestSchedule:
    def test_monotone_with_endpoints(self, config):
        taus = sigma_grid(config)
        assert taus[0] == config.sigma_max
        assert taus[-2] == pytest.approx(config.sigma_min)
        assert taus[-1] == 0.0
        assert np.all(np.diff(taus) < 0)
        assert taus.shape[0] == config.num_steps + 1

    def test_train_tau_lognormal(self, config):
        g = np.random.default_rng(3)
        taus = sample_train_taus(config, 200_000, g)
        logs = np.log(taus)
        assert logs.mean() == pytest.approx(config.p_train_mean, abs=0.02)
        assert logs.std() == pytest.approx(config.p_train_std, abs=0.02)


class TestHeunSampler:
    def test_fully_observed_echo(self, config, rng):
        x_obs = rng.normal(size=(2, 3, 5, 3))
        observed = np.ones((2, 3, 5), bool)
        valid = observed.copy()

        def score_fn(x, tau):  # pragma: no cover - never called on latents
            return np.zeros_like(x)

        out = heun_sample(score_fn, x_obs, observed, valid, config, rng, num_steps=10)
        assert np.array_equal(out, x_obs)

    def test_analytic_world_moments(self, config):
        oracle = GaussianWorldOracle(config.sigma_data)
        B = 10_000
        obs = np.zeros((B, 1, 1), bool)
        val = np.ones((B, 1, 1), bool)
        out = heun_sample(
            oracle.score, np.zeros((B, 1, 1, 3)), obs, val, config,
            np.random.default_rng(7), num_steps=50,
        )
        sd = config.sigma_data
        assert abs(out.mean()) < 0.02 * sd
        assert abs(out.std() - sd) / sd < 0.02

    def test_fewer_steps_strictly_worse(self, config):
        oracle = GaussianWorldOracle(config.sigma_data)
        B = 10_000
        obs = np.zeros((B, 1, 1), bool)
        val = np.ones((B, 1, 1), bool)
        errs = {}
        for n in (10, 50):
            out = heun_sample(
                oracle.score, np.zeros((B, 1, 1, 3)), obs, val, config,
                np.random.default_rng(7), num_steps=n,
            )
            errs[n] = abs(out.std() - config.sigma_data)
        assert errs[10] > errs[50]

    def test_heun_convergence_order(self, config):
        oracle = GaussianWorldOracle(config.sigma_data)
        g = np.random.default_rng(1)
        x_init = g.standard_normal((64, 1, 1, 3)) * config.sigma_max
        exact = x_init * oracle.exact_terminal_factor(config.sigma_max)
        obs = np.zeros((64, 1, 1), bool)
        val = np.ones((64, 1, 1), bool)
        errs = {}
        for n in (10, 40):
            out = heun_sample(
                oracle.score, np.zeros((64, 1, 1, 3)), obs, val, config,
                np.random.default_rng(0), num_steps=n, x_init=x_init,
            )
            errs[n] = np.abs(out - exact).max()
        order = np.log(errs[10] / errs[40]) / np.log(4.0)
        assert order >= 1.7

    def test_observed_slots_pinned_every_step(self, config):
        oracle = GaussianWorldOracle(config.sigma_data)
        g = np.random.default_rng(5)
        x_obs = g.normal(size=(4, 2, 6, 3))
        observed = g.random((4, 2, 6)) < 0.4
        valid = observed | (g.random((4, 2, 6)) < 0.8)
        seen = []

        def on_step(i, tau, x):
            seen.append(np.array_equal(x[observed], x_obs[observed]))

        heun_sample(
            oracle.score, x_obs, observed, valid, config, g, num_steps=12,
            on_step=on_step,
        )
        assert seen and all(seen)

    def test_determinism(self, config):
        oracle = GaussianWorldOracle(config.sigma_data)
        obs = np.zeros((8, 2, 3), bool)
        val = np.ones((8, 2, 3), bool)
        a = heun_sample(oracle.score, np.zeros((8, 2, 3, 3)), obs, val, config,
                        np.random.default_rng(11), num_steps=20)
        b = heun_sample(oracle.score, np.zeros((8, 2, 3, 3)), obs, val, config,
                        np.random.default_rng(11), num_steps=20)
        assert np.array_equal(a, b)

    def test_nan_aborts_with_diagnostics(self, config, rng):
        def bad_score(x, tau):
            s = np.zeros_like(x)
            if tau < 1.0:
                s[..., 0] = np.nan
            return s

        obs = np.zeros((2, 1, 2), bool)
        val = np.ones((2, 1, 2), bool)
        with pytest.raises(SamplerDivergenceError) as err:
            heun_sample(bad_score, np.zeros((2, 1, 2, 3)), obs, val, config,
                        rng, num_steps=20)
        assert err.value.step >= 0
        assert err.value.bad_count > 0

    def test_invalid_slots_stay_zero(self, config):
        oracle = GaussianWorldOracle(config.sigma_data)
        g = np.random.default_rng(2)
        valid = g.random((4, 2, 6)) < 0.6
        observed = np.zeros_like(valid)
        out = heun_sample(oracle.score, np.zeros((4, 2, 6, 3)), observed, valid,
                          config, g, num_steps=10)
        assert np.all(out[~valid] == 0.0)


class TestTrainingLoss:
    def _batch(self, rng, B=4, A=2, T=6):
        x0 = rng.normal(0.0, 0.5, size=(B, A, T, 3))
        valid = np.ones((B, A, T), bool)
        observed = np.zeros((B, A, T), bool)
        observed[:, :, :2] = True
        return x0, observed, valid

    def test_perfect_denoiser_zero_loss(self, config, rng):
        x0, observed, valid = self._batch(rng)

        def denoise_fn(x_noisy, taus):
            return x0.copy()

        loss = training_loss(denoise_fn, x0, observed, valid, config, rng)
        assert loss == pytest.approx(0.0, abs=1e-30)

    def test_zero_denoiser_matches_data_power(self, config):
        g = np.random.default_rng(123)
        x0, observed, valid = self._batch(g, B=256, A=3, T=10)
        latent = valid & ~observed

        def denoise_fn(x_noisy, taus):
            out = np.where(latent[..., None], 0.0, x_noisy)
            return out

        loss = training_loss(denoise_fn, x0, observed, valid, config, g)
        oracle = float((x0[latent] ** 2).mean())
        assert loss == pytest.approx(oracle, abs=1e-12)
        assert loss == pytest.approx(0.25, abs=0.02)  # data std 0.5

    def test_invalid_slots_do_not_change_loss(self, config):
        g = np.random.default_rng(5)
        x0, observed, valid = self._batch(g, B=3)

        def denoise_fn(x_noisy, taus):
            return np.zeros_like(x_noisy)

        l1 = training_loss(denoise_fn, x0, observed, valid, config,
                           np.random.default_rng(9))
        # append an invalid agent; same rng stream
        x0b = np.concatenate([x0, np.zeros_like(x0[:, :1])], axis=1)
        validb = np.concatenate([valid, np.zeros_like(valid[:, :1])], axis=1)
        obsb = np.concatenate([observed, np.zeros_like(observed[:, :1])], axis=1)
        l2 = training_loss(denoise_fn, x0b, obsb, validb, config,
                           np.random.default_rng(9))
        assert l1 == pytest.approx(l2, rel=1e-9)

    def test_zero_latent_batch_rejected(self, config, rng):
        x0 = rng.normal(size=(2, 1, 3, 3))
        valid = np.ones((2, 1, 3), bool)
        with pytest.raises(ValueError):
            training_loss(lambda x, t: x, x0, valid, valid, config, rng)

    def test_masked_mse_gradient(self, rng):
        D = rng.normal(size=(3, 2, 4, 3))
        x0 = rng.normal(size=(3, 2, 4, 3))
        latent = rng.random((3, 2, 4)) < 0.6
        loss, dD = masked_mse(D, x0, latent)
        # numeric check on a few entries
        g = np.random.default_rng(0)
        for _ in range(10):
            idx = tuple(g.integers(0, s) for s in D.shape)
            h = 1e-6
            Dp = D.copy(); Dp[idx] += h
            Dm = D.copy(); Dm[idx] -= h
            fd = (masked_mse(Dp, x0, latent)[0] - masked_mse(Dm, x0, latent)[0]) / (2 * h)
            assert dD[idx] == pytest.approx(fd, abs=1e-6)
