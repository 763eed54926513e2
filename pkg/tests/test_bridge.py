import numpy as np
import pytest
import torch

from bridgestain.bridge import (
    build_schedule,
    forward_sample,
    marginal,
    posterior_mean,
    step_mean,
    training_target,
    x0_from_eps,
)
from bridgestain.errors import InvalidConfigError, InvalidStepError


# -- Gaussian-conditioning oracle ------------------------------------------------
# The bridge is sqrt(2) times a standard Brownian bridge run in m-time, so
# Cov(x_s, x_t) = 2 m_s (1 - m_t) for s <= t. Conditioning x_{t-1} on x_t (with
# x0 and y fixed) is then plain bivariate Gaussian algebra.


def bridge_cov(T, s, t):
    ms, mt = min(s, t) / T, max(s, t) / T
    return 2.0 * ms * (1.0 - mt)


def oracle_conditional(T, t, x_t, x0, y):
    mu = lambda k: (1 - k / T) * x0 + (k / T) * y
    var_t = bridge_cov(T, t, t)
    c = bridge_cov(T, t - 1, t)
    mean = mu(t - 1) + c / var_t * (x_t - mu(t))
    var = bridge_cov(T, t - 1, t - 1) - c * c / var_t
    return mean, var


def oracle_coefficients(T, t):
    """Coefficients of the conditional mean as a linear map of (x_t, x0, y)."""
    a = oracle_conditional(T, t, 1.0, 0.0, 0.0)[0]
    b = oracle_conditional(T, t, 0.0, 1.0, 0.0)[0]
    c = oracle_conditional(T, t, 0.0, 0.0, 1.0)[0]
    return a, b, c, oracle_conditional(T, t, 0.0, 0.0, 0.0)[1]


class TestSchedule:
    def test_values_t1000(self):
        s = build_schedule(1000)
        assert s.m[500] == 0.5 and s.delta[500] == 0.5
        assert s.delta[0] == 0.0 and s.delta[1000] == 0.0
        assert s.m[0] == 0.0 and s.m[1000] == 1.0
        assert s.delta_tilde[1] == 0.0
        assert np.max(np.abs(s.delta - s.delta[::-1])) <= 1e-15
        assert np.all(np.diff(s.m) > 0)
        assert s.delta.max() == 0.5 and int(np.argmax(s.delta)) == 500

    @pytest.mark.parametrize("T", [2, 3, 10, 1000])
    def test_nonnegative(self, T):
        s = build_schedule(T)
        assert np.all(s.delta_tilde >= 0)
        assert np.all(s.delta_step[1:T] >= 0)
        assert s.delta_tilde[1] == 0.0

    def test_delta_tilde_closed_form(self):
        # conditioning the bridge covariance gives delta_tilde_t = 2 (t - 1) / (t T)
        T = 1000
        s = build_schedule(T)
        t = np.arange(1, T + 1)
        np.testing.assert_allclose(s.delta_tilde[1:], 2.0 * (t - 1) / (t * T), rtol=0, atol=1e-15)
        assert np.all(np.diff(s.delta_tilde[1:]) > 0)

    def test_rejects_small_T(self):
        with pytest.raises(InvalidConfigError):
            build_schedule(1)

    def test_immutable(self):
        s = build_schedule(10)
        with pytest.raises(ValueError):
            s.c_x[3] = 0.0

    def test_csv_dump(self):
        s = build_schedule(4)
        lines = s.to_csv().split("\r\n")
        assert lines[0] == "t,m_t,delta_t,delta_step_t,delta_tilde_t,c_x,c_y,c_eps"
        assert len(lines) == 7 and lines[-1] == ""  # header, 5 rows, trailing terminator
        assert float(lines[3].split(",")[1]) == 0.5


class TestOracleCoefficients:
    T = 10

    @pytest.mark.parametrize("t", range(2, 10))
    def test_regular_steps(self, t):
        s = build_schedule(self.T)
        a, b, c, var = oracle_coefficients(self.T, t)
        # c_x x_t + c_y y - c_eps (x_t - x0) = (c_x - c_eps) x_t + c_eps x0 + c_y y
        assert abs((s.c_x[t] - s.c_eps[t]) - a) < 1e-10
        assert abs(s.c_eps[t] - b) < 1e-10
        assert abs(s.c_y[t] - c) < 1e-10
        assert abs(s.delta_tilde[t] - var) < 1e-10

    def test_terminal_step_is_marginal(self):
        T = self.T
        s = build_schedule(T)
        x0, y = 0.37, -1.4
        got = step_mean(s, np.array(y), np.array(y), T, np.array(y - x0))
        want = (1 - (T - 1) / T) * x0 + (T - 1) / T * y
        assert abs(got - want) < 1e-10
        assert abs(s.delta_tilde[T] - bridge_cov(T, T - 1, T - 1)) < 1e-10
        # the stored coefficients give the same mean
        alt = s.c_x[T] * y + s.c_y[T] * y - s.c_eps[T] * (y - x0)
        assert abs(alt - want) < 1e-10

    @pytest.mark.parametrize("t", range(1, 10))
    def test_posterior_mean_with_true_eps(self, t):
        s = build_schedule(self.T)
        x0, y, x_t = 0.8, -0.3, 1.7
        got = posterior_mean(s, np.array(x_t), np.array(y), t, np.array(x_t - x0))
        assert abs(got - oracle_conditional(self.T, t, x_t, x0, y)[0]) < 1e-10

    @pytest.mark.parametrize("t", range(1, 11))
    def test_markov_consistency(self, t):
        T = self.T
        s = build_schedule(T)
        m, d = s.m, s.delta
        a = (1 - m[t]) / (1 - m[t - 1])
        b = m[t] - m[t - 1] * a
        x0, y = 0.6, -0.9
        mu = lambda k: (1 - m[k]) * x0 + m[k] * y
        assert abs(a * mu(t - 1) + b * y - mu(t)) < 1e-10
        if t < T:
            assert abs(a * a * d[t - 1] + s.delta_step[t] - d[t]) < 1e-10
            # the kernel's implied covariance agrees with the bridge covariance
            assert abs(a * d[t - 1] - bridge_cov(T, t - 1, t)) < 1e-10

    def test_t1_identity(self):
        s = build_schedule(1000)
        assert s.c_x[1] == pytest.approx(1.0, abs=1e-12)
        assert s.c_y[1] == pytest.approx(0.0, abs=1e-12)
        assert s.c_eps[1] == pytest.approx(1.0, abs=1e-12)
        x0 = np.random.default_rng(0).normal(size=(4, 4))
        y = np.random.default_rng(1).normal(size=(4, 4))
        x1 = marginal(s, x0, y, 1, np.random.default_rng(2).normal(size=(4, 4)))
        out = posterior_mean(s, x1, y, 1, x1 - x0)
        np.testing.assert_allclose(out, x0, atol=1e-12)
        np.testing.assert_allclose(out, x0_from_eps(x1, x1 - x0), atol=1e-10)


class TestForward:
    s = build_schedule(1000)

    def test_endpoints(self):
        rng = np.random.default_rng(0)
        x0, y = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        np.testing.assert_array_equal(forward_sample(self.s, x0, y, 0, rng)[0], x0)
        np.testing.assert_array_equal(forward_sample(self.s, x0, y, 1000, rng)[0], y)

    @pytest.mark.parametrize("t", [250, 500, 750])
    def test_marginal_moments(self, t):
        n = 20000
        x0, y = np.full(n, 0.3), np.full(n, -0.5)
        xt, _ = forward_sample(self.s, x0, y, t, np.random.default_rng(t))
        mean = (1 - self.s.m[t]) * 0.3 + self.s.m[t] * -0.5
        var = self.s.delta[t]
        assert abs(xt.mean() - mean) < 4 * np.sqrt(var / n)
        assert abs(xt.var() / var - 1) < 0.03

    def test_midpoint_variance(self):
        xt, _ = forward_sample(self.s, np.zeros(20000), np.zeros(20000), 500, np.random.default_rng(9))
        assert abs(xt.var() - 0.5) < 0.02

    def test_target_identity(self):
        rng = np.random.default_rng(1)
        x0, y = rng.normal(size=(8, 8, 3)), rng.normal(size=(8, 8, 3))
        for t in (0, 1, 317, 999, 1000):
            xt, eps = forward_sample(self.s, x0, y, t, rng)
            np.testing.assert_allclose(training_target(self.s, x0, y, t, eps), xt - x0, atol=1e-12)
        np.testing.assert_array_equal(training_target(self.s, x0, y, 0, eps), 0.0)
        np.testing.assert_allclose(training_target(self.s, x0, y, 1000, eps), y - x0)

    def test_torch_inputs(self):
        x0, y, eps = torch.zeros(2, 2), torch.ones(2, 2), torch.zeros(2, 2)
        assert torch.allclose(marginal(self.s, x0, y, 500, eps), torch.full((2, 2), 0.5, dtype=torch.float32))

    def test_errors(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            forward_sample(self.s, np.zeros(3), np.zeros(4), 5, rng)
        with pytest.raises(InvalidStepError):
            posterior_mean(self.s, np.zeros(3), np.zeros(3), 1000, np.zeros(3))
        with pytest.raises(InvalidStepError):
            posterior_mean(self.s, np.zeros(3), np.zeros(3), 0, np.zeros(3))
        with pytest.raises(ValueError):
            x0_from_eps(np.zeros(3), np.zeros(2))

    def test_zero_eps_is_linear_part(self):
        x, y = np.array([0.4]), np.array([-0.2])
        got = posterior_mean(self.s, x, y, 300, np.zeros(1))
        np.testing.assert_allclose(got, self.s.c_x[300] * x + self.s.c_y[300] * y)
        np.testing.assert_array_equal(x0_from_eps(x, np.zeros(1)), x)
