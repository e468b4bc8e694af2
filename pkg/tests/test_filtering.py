import numpy as np
import pytest

from cdsb import filtering as F
from cdsb.errors import FitError
from cdsb.problems import generate_twin, linear_ssm, lorenz63


def _kalman_analysis(forecast, y, obs_var):
    mf, vf = forecast.mean(), forecast.var(ddof=1)
    k = vf / (vf + obs_var)
    return mf + k * (y - mf), (1 - k) * vf


def test_enkf_uninformative_observation_leaves_forecast(rng):
    fc = rng.standard_normal((500, 3))
    out, gain = F.enkf_analysis(fc, np.zeros(3), 1e12, 1.0, rng)
    assert np.abs(gain).max() < 1e-10
    np.testing.assert_allclose(out, fc, atol=1e-4)


def test_enkf_matches_scalar_kalman(rng):
    m = 100_000
    fc = 0.3 + np.sqrt(0.8) * rng.standard_normal((m, 1))
    out, _ = F.enkf_analysis(fc, [1.2], 1.0, 1.0, rng)
    ma, va = _kalman_analysis(fc[:, 0], 1.2, 1.0)
    assert abs(out.mean() - ma) < 4 * np.sqrt(va / m)
    # perturbed observations roughly double the spread of the variance estimate
    assert abs(out.var() - va) < 8 * va * np.sqrt(2 / m)

def test_enkf_identical_particles_use_variance_floor(rng):
    gain = F.kalman_gain(np.ones((50, 2)), 4.0)
    assert np.all(np.isfinite(gain))
    assert np.abs(gain).max() < 1e-8
    out, _ = F.enkf_analysis(np.ones((50, 2)), [3.0, 3.0], 4.0, 1.0, rng)
    assert np.all(np.isfinite(out))


def test_systematic_resample_counts(rng):
    w = rng.random(1000)
    w /= w.sum()
    idx = F.systematic_resample(w, rng)
    assert idx.size == w.size
    counts = np.bincount(idx, minlength=w.size)
    # systematic resampling keeps every count within one of M w_i
    assert np.all(np.abs(counts - w.size * w) < 1.0)
    # equal weights after resampling: effective sample size equals M
    ew = np.full(idx.size, 1.0 / idx.size)
    assert 1.0 / np.sum(ew ** 2) == pytest.approx(idx.size)


def test_pf_flat_likelihood_is_prior_predictive():
    model = linear_ssm(0.9, 0.5, 1e12)
    o = F.pf_oracle(model, np.array([[5.0]]), np.array([2.0]), 100_000, seed=0)
    # forecast of N(2, 1): mean 1.8, variance 0.81 + 0.5
    assert o.means[0, 0] == pytest.approx(1.8, abs=4 * np.sqrt(1.31 / 1e5))
    assert o.stds[0, 0] ** 2 == pytest.approx(1.31, rel=0.02)


def test_pf_matches_kalman_on_linear_ssm():
    model = linear_ssm(0.9, 0.5, 1.0)
    twin = generate_twin(model, 30, 30, seed=0)
    mk, vk = F.kalman_filter_1d(0.9, 0.5, 1.0, twin.observations, twin.init_mean[0], model.init_var)
    o = F.pf_oracle(model, twin.observations, twin.init_mean, 100_000, seed=1)
    # resampling inflates the Monte Carlo error above sigma / sqrt(M); allow the 3-sigma band per step
    # with the usual multiple-testing slack across 30 steps
    z = np.abs(o.means[:, 0] - mk) / np.sqrt(vk / 1e5)
    assert np.median(z) < 3 and z.max() < 4.5
    np.testing.assert_allclose(o.stds[:, 0] ** 2, vk, rtol=0.03)


def test_pf_oracle_self_consistency():
    twin = generate_twin(lorenz63(), 200, 100, seed=0)
    a = F.pf_oracle(twin.model, twin.observations, twin.init_mean, 100_000, seed=1)
    b = F.pf_oracle(twin.model, twin.observations, twin.init_mean, 100_000, seed=2)
    assert np.sqrt(np.mean((a.means - b.means) ** 2)) < 0.05


def test_kalman_filter_1d_steady_state():
    means, var = F.kalman_filter_1d(1.0, 0.0, 1.0, np.ones(99), 0.0, 1.0)
    # static state with unit prior: posterior after n unit-noise observations has variance 1/(n+1)
    assert var[-1] == pytest.approx(1 / 100)
    assert means[-1] == pytest.approx(99 / 100)


def test_cdsb_assimilation_matches_kalman_step():
    model = linear_ssm(0.9, 0.5, 1.0)
    rng = np.random.default_rng(0)
    ens = F.EnsembleState(0.3 + np.sqrt(0.8) * rng.standard_normal((2000, 1)))
    # linear features; the long chain keeps the mean-matching step bias near 2%
    cfg = F.AssimilationConfig(n_rbf=0, long=True)
    out = F.cdsb_assimilate(ens, [1.2], model, F.CDSB, cfg, seed=0)
    p = ens.particles[:, 0]
    mf, vf = 0.9 * p.mean(), 0.81 * p.var(ddof=1) + 0.5
    k = vf / (vf + 1.0)
    ma, va = mf + k * (1.2 - mf), (1 - k) * vf
    assert out.particles.mean() == pytest.approx(ma, rel=0.05)
    assert out.particles.var(ddof=1) == pytest.approx(va, rel=0.05)
    assert out.t == 1 and out.tag == F.CDSB


def test_zero_length_conditional_chain_returns_reference():
    model = linear_ssm(0.9, 0.5, 1.0)
    rng = np.random.default_rng(1)
    ens = F.EnsembleState(rng.standard_normal((4000, 1)))
    cfg = F.AssimilationConfig(n_rbf=0, n_short=2, gamma_min=1e-8, gamma_max=1e-8)
    out = F.cdsb_assimilate(ens, [1.0], model, F.CSGM_C, cfg, seed=0).particles[:, 0]
    # the conditional reference is the EnKF analysis Gaussian, i.e. the Kalman update of the forecast
    p = ens.particles[:, 0]
    mf, vf = 0.9 * p.mean(), 0.81 * p.var(ddof=1) + 0.5
    ma, va = mf + vf / (vf + 1.0) * (1.0 - mf), vf / (vf + 1.0)
    assert out.mean() == pytest.approx(ma, abs=4 * np.sqrt(va / 4000) + 0.03)
    assert out.var() == pytest.approx(va, rel=0.1)


def test_small_ensemble_falls_back_to_enkf():
    model = linear_ssm()
    ens = F.EnsembleState(np.random.default_rng(0).standard_normal((10, 1)))
    out = F.cdsb_assimilate(ens, [0.0], model, F.CDSB, seed=0)
    assert out.size == 10 and out.t == 1


def test_divergence_step():
    r = np.r_[np.ones(5), np.full(12, 9.0), np.ones(3)]
    assert F.divergence_step(r) == 5
    assert F.divergence_step(np.r_[np.ones(5), np.full(9, 9.0)]) is None
    assert F.divergence_step(np.r_[np.ones(2), np.full(10, np.inf)]) == 2


def test_run_filter_fit_failure_marks_divergence(monkeypatch):
    model = linear_ssm()
    twin = generate_twin(model, 20, 10, seed=0)
    oracle = F.pf_oracle(model, twin.observations, twin.init_mean, 2000, 0)

    def failing(ens, y, model, variant, cfg, seed):
        if ens.t == 3:
            raise FitError("ill-posed regression")
        return F.enkf_step(ens, y, model)

    monkeypatch.setattr(F, "cdsb_assimilate", failing)
    rep = F.run_filter(twin, F.CDSB, 100, oracle, seed=0)
    assert rep.diverged and rep.divergence_step == 3
    assert np.isinf(rep.rmse_oracle)


def test_enkf_run_on_linear_model_tracks_oracle():
    model = linear_ssm()
    twin = generate_twin(model, 60, 50, seed=0)
    oracle = F.pf_oracle(model, twin.observations, twin.init_mean, 50_000, 0)
    rep = F.run_filter(twin, F.ENKF, 2000, oracle, seed=0)
    assert not rep.diverged
    assert rep.rmse_oracle < 0.05
    assert rep.std_rmse < 0.05
