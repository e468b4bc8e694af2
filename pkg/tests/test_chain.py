import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdsb.chain import (BACKWARD, BROWNIAN, FORWARD, LANGEVIN, OU, InitialDrift, Schedule,
                        gaussian_step, iterate_chain, linear_schedule,
                        ou_variance_recursion, run_to_end, simulate_chain)
from cdsb.errors import ChainError, InvalidArgument
from cdsb.refmeasure import iso_gaussian


def test_constant_schedule():
    np.testing.assert_array_equal(linear_schedule(3, 0.01, 0.01).gammas, [0.01, 0.01, 0.01])


def test_linear_schedule_endpoints_and_middle():
    s = linear_schedule(50, 1e-4, 5e-3)
    assert s.gamma(1) == pytest.approx(1e-4, abs=1e-18)
    assert s.gamma(50) == pytest.approx(5e-3, abs=1e-18)
    # gamma_k = k * 1e-4 for this schedule
    assert s.gamma(25) == pytest.approx(2.5e-3, rel=1e-12)


@given(n=st.integers(2, 200), lo=st.floats(1e-6, 1.0), hi=st.floats(1e-6, 1.0))
@settings(max_examples=60, deadline=None)
def test_linear_schedule_formula(n, lo, hi):
    s = linear_schedule(n, lo, hi)
    assert s.n_steps == n and np.all(s.gammas > 0)
    k = np.arange(1, n + 1)
    np.testing.assert_allclose(s.gammas, lo + (k - 1) / (n - 1) * (hi - lo), rtol=1e-12, atol=1e-15)


def test_tampered_schedule_breaks_identity():
    s = linear_schedule(10, 0.01, 0.1)
    g = s.gammas.copy()
    g[4] *= 1.01
    k = np.arange(1, 11)
    assert not np.allclose(g, 0.01 + (k - 1) / 9 * 0.09, rtol=1e-12, atol=0)


def test_schedule_rejects_bad_values():
    with pytest.raises(InvalidArgument):
        linear_schedule(0, 0.1, 0.1)
    with pytest.raises(InvalidArgument):
        linear_schedule(5, -0.1, 0.1)
    with pytest.raises(InvalidArgument):
        Schedule(np.array([0.1, 0.1]), scale=np.array([1.0, 0.0]))


def test_scaled_step_checks_dimension():
    s = linear_schedule(2, 0.1, 0.1, scale=[1.0, 2.0])
    np.testing.assert_allclose(s.step(1, 2), [0.1, 0.2])
    with pytest.raises(InvalidArgument):
        s.step(1, 3)


def test_gaussian_step_examples():
    assert gaussian_step(np.zeros(1), np.zeros(1), 0.5, np.zeros(1))[0] == 0.0
    x = np.ones(1)
    assert gaussian_step(x, x - 0.01 * x, 0.01, np.zeros(1))[0] == pytest.approx(0.99)
    with pytest.raises(InvalidArgument):
        gaussian_step(np.zeros(2), np.zeros(3), 0.1, np.zeros(2))


@pytest.mark.parametrize("gamma", [0.003, 0.2, 1.5])
def test_gaussian_step_increment_variance(gamma):
    z = np.random.default_rng(0).standard_normal(100_000)
    inc = gaussian_step(np.zeros_like(z), np.zeros_like(z), gamma, z)
    v = inc.var(ddof=1)
    se = 2 * gamma * np.sqrt(2.0 / (z.size - 1))
    assert abs(v - 2 * gamma) < 3 * se


def test_empty_chain_is_initial_batch():
    s = Schedule(np.zeros(0))
    x0 = np.arange(6.0).reshape(3, 2)
    traj = simulate_chain(x0, np.zeros((3, 0)), InitialDrift(OU, s), s, 0)
    assert traj.states.shape == (1, 3, 2)
    np.testing.assert_array_equal(traj.states[0], x0)


def test_single_ou_step_without_noise():
    s = linear_schedule(1, 0.1, 0.1)
    out = list(iterate_chain(np.array([[2.0]]), np.zeros((1, 0)), InitialDrift(OU, s), s, 0,
                             FORWARD, noise_fn=lambda k: np.zeros((1, 1))))
    assert out[-1][1][0, 0] == pytest.approx(1.8)


def test_ou_chain_variance_from_point_mass():
    s = linear_schedule(30, 0.01, 0.05)
    m = 100_000
    traj = simulate_chain(np.zeros((m, 1)), np.zeros((m, 0)), InitialDrift(OU, s), s, 7)
    expected = ou_variance_recursion(s)
    for k in (1, 10, 30):
        v = traj.states[k, :, 0].var(ddof=1)
        se = expected[k] * np.sqrt(2.0 / (m - 1))
        assert abs(v - expected[k]) < 3 * se


def test_trajectory_shapes_and_frozen_conditions():
    s = linear_schedule(4, 0.1, 0.1)
    y = np.random.default_rng(0).standard_normal((5, 2))
    traj = simulate_chain(np.zeros((5, 3)), y, InitialDrift(BROWNIAN, s), s, 1)
    assert traj.states.shape == (5, 5, 3)
    np.testing.assert_array_equal(traj.conditions, y)
    with pytest.raises(ValueError):
        traj.conditions[0, 0] = 1.0


def test_same_seed_same_chain_and_direction_streams_differ():
    s = linear_schedule(5, 0.1, 0.1)
    d = InitialDrift(OU, s)
    a = run_to_end(np.zeros((4, 1)), np.zeros((4, 0)), d, s, 3, FORWARD)
    b = run_to_end(np.zeros((4, 1)), np.zeros((4, 0)), d, s, 3, FORWARD)
    c = run_to_end(np.zeros((4, 1)), np.zeros((4, 0)), d, s, 4, FORWARD)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_langevin_drift_targets_reference():
    s = linear_schedule(1, 0.1, 0.1)
    ref = iso_gaussian(2.0, 0.5, 1)
    d = InitialDrift(LANGEVIN, s, ref)
    # x + gamma * (mu - x) / var
    assert d.mean(0, np.array([[0.0]]), np.zeros((1, 0)))[0, 0] == pytest.approx(0.1 * 2.0 / 0.5)
    with pytest.raises(InvalidArgument):
        InitialDrift(LANGEVIN, s)


class _Broken:
    def mean(self, k, x, y):
        out = x.copy()
        out[1] = np.nan
        return out


def test_chain_error_reports_step_and_row():
    s = linear_schedule(3, 0.1, 0.1)
    with pytest.raises(ChainError) as exc:
        simulate_chain(np.zeros((3, 1)), np.zeros((3, 0)), _Broken(), s, 0, BACKWARD)
    assert exc.value.k == 3 and exc.value.row == 1
