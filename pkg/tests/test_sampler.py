import numpy as np
import pytest

from oracles import StdNormal, gaussian_denoiser
from timebridge import priors as P
from timebridge import schedule as S
from timebridge.sampler import (
    SamplerConfig,
    SamplerError,
    bridge_sample,
    nfe_count,
    sample_point_preserving,
    sample_unconditional,
    time_grid,
)

SCHED = S.NoiseSchedule(beta_min=0.2, beta_d=10.0)


def toy_denoiser(x, t, xT):
    # cheap nonlinear stand-in for a trained model
    return 0.5 * np.tanh(x + xT) + 0.1 * t


class TestGrid:
    def test_single_step(self):
        ts = time_grid(SamplerConfig(n_steps=1), SCHED)
        np.testing.assert_array_equal(ts, [SCHED.t_guard, SCHED.t_min])

    def test_uniform_spacing(self):
        ts = time_grid(SamplerConfig(n_steps=4), SCHED)
        assert np.max(np.abs(np.diff(ts) - np.diff(ts)[0])) < 1e-12
        assert np.all(np.diff(ts) < 0)

    def test_power_endpoints_exact(self):
        cfg = SamplerConfig(n_steps=10, grid="power", t_lo=0.01, t_hi=0.9)
        ts = time_grid(cfg, SCHED)
        assert ts[0] == 0.9 and ts[-1] == 0.01
        assert np.all(np.diff(ts) < 0)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            time_grid(SamplerConfig(t_hi=1.0), SCHED)
        with pytest.raises(ValueError):
            time_grid(SamplerConfig(t_lo=0.0), SCHED)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SamplerConfig(n_steps=0)
        with pytest.raises(ValueError):
            SamplerConfig(churn=1.5)


class TestNFE:
    def test_formula(self):
        assert nfe_count(SamplerConfig(n_steps=40)) == 119
        assert nfe_count(SamplerConfig(n_steps=1)) == 2
        assert nfe_count(SamplerConfig(n_steps=40, final_denoise=True)) == 120

    @pytest.mark.parametrize("gamma", [1, 2, 5, 40])
    def test_counter_matches(self, gamma):
        cfg = SamplerConfig(n_steps=gamma)
        res = sample_unconditional(toy_denoiser, SCHED, StdNormal((4, 2)), cfg, np.random.default_rng(0), n=3)
        assert res.nfe == nfe_count(cfg) == 3 * gamma - 1


class TestDeterminism:
    def test_same_seed_same_output(self):
        x_T = np.random.default_rng(0).normal(size=(4, 6, 2))
        a = bridge_sample(toy_denoiser, SCHED, x_T, SamplerConfig(n_steps=5), np.random.default_rng(1)).x0
        b = bridge_sample(toy_denoiser, SCHED, x_T, SamplerConfig(n_steps=5), np.random.default_rng(1)).x0
        np.testing.assert_array_equal(a, b)

    def test_zero_churn_seed_independent(self):
        x_T = np.random.default_rng(0).normal(size=(4, 6, 2))
        cfg = SamplerConfig(n_steps=5, churn=0.0)
        a = bridge_sample(toy_denoiser, SCHED, x_T, cfg, np.random.default_rng(1)).x0
        b = bridge_sample(toy_denoiser, SCHED, x_T, cfg, np.random.default_rng(2)).x0
        np.testing.assert_array_equal(a, b)

    def test_positive_churn_uses_noise(self):
        x_T = np.zeros((4, 6, 2))
        a = bridge_sample(toy_denoiser, SCHED, x_T, SamplerConfig(n_steps=5), np.random.default_rng(1)).x0
        b = bridge_sample(toy_denoiser, SCHED, x_T, SamplerConfig(n_steps=5), np.random.default_rng(2)).x0
        assert not np.array_equal(a, b)

    def test_sample_independent_of_batch_size(self):
        x_T = np.random.default_rng(0).normal(size=(6, 5, 1))
        cfg = SamplerConfig(n_steps=4)
        big = bridge_sample(toy_denoiser, SCHED, x_T, cfg, np.random.default_rng(3)).x0
        small = bridge_sample(toy_denoiser, SCHED, x_T[:2], cfg, np.random.default_rng(3)).x0
        np.testing.assert_allclose(small, big[:2], rtol=0, atol=1e-14)


class TestMasking:
    def test_all_preserved_returns_endpoint(self):
        rng = np.random.default_rng(0)
        x_T = rng.normal(size=(3, 8, 2))
        res = bridge_sample(lambda x, t, xT: x * 1e6, SCHED, x_T, SamplerConfig(n_steps=6), rng,
                            mask=np.zeros_like(x_T))
        np.testing.assert_array_equal(res.x0, x_T)

    def test_all_generated_equals_unconditional(self):
        prior = StdNormal((8, 2))
        cfg = SamplerConfig(n_steps=6)
        u = sample_unconditional(toy_denoiser, SCHED, prior, cfg, np.random.default_rng(4), n=3)
        x_T = prior.sample(3, np.random.default_rng(4))
        rng = np.random.default_rng(4)
        prior.sample(3, rng)
        m = sample_point_preserving(toy_denoiser, SCHED, x_T, np.ones_like(x_T), cfg, rng)
        np.testing.assert_array_equal(u.x0, m.x0)

    def test_partial_mask_bit_exact(self):
        rng = np.random.default_rng(5)
        values = rng.normal(size=(10, 12, 3))
        mask = (rng.random(values.shape) < 0.5).astype(float)
        ep = P.spline_interpolate(values, 1.0 - mask)
        res = sample_point_preserving(toy_denoiser, SCHED, ep, mask, SamplerConfig(n_steps=8), rng)
        keep = mask == 0
        assert np.array_equal(res.x0[keep], ep.values[keep])
        assert np.array_equal(res.x0[keep], values[keep])
        assert not np.allclose(res.x0[~keep], ep.values[~keep])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            bridge_sample(toy_denoiser, SCHED, np.zeros((2, 4, 1)), SamplerConfig(n_steps=2),
                          np.random.default_rng(0), mask=np.zeros((2, 5, 1)))


def test_non_finite_reports_step():
    def bad(x, t, xT):
        return np.full_like(x, np.nan) if t < 0.5 else x

    with pytest.raises(SamplerError, match="step"):
        bridge_sample(bad, SCHED, np.zeros((1, 4, 1)), SamplerConfig(n_steps=4), np.random.default_rng(0))


def test_h_pulls_toward_endpoint():
    rng = np.random.default_rng(0)
    t = SCHED.t_guard
    for _ in range(20):
        x_T = rng.normal(size=5)
        x = rng.normal(size=5)
        h = S.h_function(SCHED, x, t, x_T)
        # d/de |x + e h - target|^2 at e = 0
        target = S.alpha(SCHED, t) / S.alpha(SCHED, SCHED.t_max) * x_T
        assert 2 * np.dot(x - target, h) < 0


def test_gaussian_oracle_with_churn():
    mean, var = 0.3, 0.04
    den = gaussian_denoiser(SCHED, mean, var)
    res = sample_unconditional(den, SCHED, StdNormal(), SamplerConfig(n_steps=40, churn=0.33),
                               np.random.default_rng(0), n=100_000)
    assert abs(res.x0.mean() - mean) < 0.02 * mean
    assert abs(res.x0.var() - var) < 0.05 * var
