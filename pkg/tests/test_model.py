import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mode_sleuth import matfun
from mode_sleuth.errors import DegenerateRates, InvalidInput
from mode_sleuth.model import (
    FOU,
    OU,
    Langevin,
    LtiSystem,
    ModeModel,
    ModeShapes,
    ModeSpec,
    kernel_eval,
    lagged_covariance,
    log_from_psd,
    mean_response,
    mode_block_diagonal,
    mode_covariance,
    mode_realize,
    parameter_dimension,
    pin_shapes,
    psd_from_log,
    stationary_covariance,
)

LAGS = [0.0, 0.1, 1.0, 10.0]


def pipeline_kernel(sys: LtiSystem, tau: float, row: int) -> float:
    return lagged_covariance(sys, tau)[row, row]


class TestCovariances:
    def test_ou_stationary(self):
        np.testing.assert_allclose(stationary_covariance(OU(1.0, math.sqrt(2)).realize()), [[1.0]])

    def test_commuting(self):
        np.testing.assert_allclose(stationary_covariance(LtiSystem(-np.eye(2), np.eye(2))), 0.5 * np.eye(2))

    def test_lag_zero(self, rng):
        from conftest import random_psd, random_stable

        sys = LtiSystem(random_stable(rng, 3), random_psd(rng, 3))
        np.testing.assert_array_equal(lagged_covariance(sys, 0.0), stationary_covariance(sys))

    def test_ou_lag(self):
        C = lagged_covariance(OU(1.0, math.sqrt(2)).realize(), 2.0)
        assert C[0, 0] == pytest.approx(math.exp(-2), rel=1e-12)
        assert C[0, 0] == pytest.approx(0.13534, abs=5e-6)

    def test_rotation_lag(self):
        a, w, q, tau = 0.3, 2.0, 0.8, 0.7
        sys = LtiSystem([[-a, -w], [w, -a]], q * np.eye(2))
        c, s = math.cos(w * tau), math.sin(w * tau)
        expected = q / (2 * a) * math.exp(-a * tau) * np.array([[c, s], [-s, c]])
        np.testing.assert_allclose(lagged_covariance(sys, tau), expected, atol=1e-14)

    def test_negative_lag_is_transpose(self, rng):
        from conftest import random_psd, random_stable

        sys = LtiSystem(random_stable(rng, 3), random_psd(rng, 3))
        np.testing.assert_allclose(lagged_covariance(sys, -0.4), lagged_covariance(sys, 0.4).T, atol=1e-13)

    def test_mean_response(self):
        np.testing.assert_array_equal(mean_response(LtiSystem(-np.eye(2), np.eye(2))), [0.0, 0.0])
        np.testing.assert_allclose(mean_response(LtiSystem([[-2.0]], [[1.0]], [4.0])), [2.0])
        np.testing.assert_allclose(mean_response(LtiSystem(np.diag([-1.0, -4.0]), np.eye(2), [3.0, 8.0])), [3.0, 2.0])


class TestKernels:
    def test_ou_zero_lag(self):
        assert kernel_eval(OU(1.0, math.sqrt(2)), 0.0) == pytest.approx(1.0, rel=1e-15)

    def test_langevin_critical(self):
        p = Langevin(1.0, 2.0, 1.0, 2.0)
        assert p.regime == "critical"
        assert kernel_eval(p, 1.0) == pytest.approx(2 * math.exp(-1), rel=1e-14)
        assert kernel_eval(p, 1.0) == pytest.approx(0.73576, abs=5e-6)

    def test_fou_zero_lag_unit_gamma(self):
        J = math.e**2
        p = FOU(M=1.0, gamma=1.0, J=J, sigma=1.0)
        assert kernel_eval(p, 0.0) == pytest.approx(1 / (2 * J * (1 + J)), rel=1e-13)

    def test_fou_zero_lag_general_rates(self):
        # Gamma = 1/e with unit inertia; variance of the filtered OU is
        # sigma^2 / (2 J Gamma (Gamma + J)).
        G, J = 1 / math.e, math.e**2
        p = FOU(M=1.0, gamma=G, J=J, sigma=1.0)
        assert kernel_eval(p, 0.0) == pytest.approx(1 / (2 * J * G * (G + J)), rel=1e-13)

    def test_fou_degenerate(self):
        with pytest.raises(DegenerateRates):
            kernel_eval(FOU(1.0, 2.0, 2.0, 1.0), 0.3)

    def test_nonpositive(self):
        with pytest.raises(InvalidInput):
            OU(-1.0, 1.0)

    @pytest.mark.parametrize(
        "p",
        [
            Langevin(1.0, 0.4, 4.0, 1.3),  # underdamped
            Langevin(1.0, 2.0, 1.0, 2.0),  # critical
            Langevin(2.0, 5.0, 1.0, 0.7),  # overdamped
        ],
        ids=lambda p: p.regime,
    )
    @pytest.mark.parametrize("tau", LAGS)
    def test_langevin_matches_pipeline(self, p, tau):
        assert abs(kernel_eval(p, tau) - pipeline_kernel(p.realize(), tau, 0)) < 1e-9

    @pytest.mark.parametrize("tau", LAGS)
    def test_ou_matches_pipeline(self, tau):
        p = OU(0.7, 1.1)
        assert abs(kernel_eval(p, tau) - pipeline_kernel(p.realize(), tau, 0)) < 1e-9

    @pytest.mark.parametrize("tau", LAGS)
    def test_fou_matches_pipeline(self, tau):
        p = FOU(1.0, 1 / math.e, math.e**2, 1.0)
        assert abs(kernel_eval(p, tau) - pipeline_kernel(p.realize(), tau, 1)) < 1e-9

    @pytest.mark.parametrize("tau", LAGS)
    def test_fou_equals_overdamped_langevin(self, tau):
        p = FOU(1.3, 0.5, 2.0, 0.9)
        lang = p.as_langevin()
        assert lang.regime == "overdamped"
        assert abs(kernel_eval(p, tau) - kernel_eval(lang, tau)) < 1e-9

    @given(
        st.floats(0.05, 5), st.floats(0.05, 5), st.floats(0.05, 5), st.floats(0.1, 3), st.floats(0, 10)
    )
    def test_langevin_any_regime(self, m, beta, k, sigma, tau):
        p = Langevin(m, beta, k, sigma)
        disc = beta**2 / 4 - m * k
        if abs(disc) < 1e-6 * max(1.0, m * k):
            return  # the generic closed forms lose precision at the crossover
        ref = pipeline_kernel(p.realize(), tau, 0)
        assert abs(kernel_eval(p, tau) - ref) <= 1e-8 * max(1.0, abs(kernel_eval(p, 0.0)))


class TestModes:
    def test_block_real(self):
        np.testing.assert_array_equal(mode_block_diagonal(ModeSpec((2.0,))), [[-2.0]])

    def test_block_complex(self):
        np.testing.assert_array_equal(mode_block_diagonal(ModeSpec((), ((0.1, 3.0),))), [[-0.1, -3.0], [3.0, -0.1]])

    def test_block_mixed(self):
        D = mode_block_diagonal(ModeSpec((1.0, 2.0), ((0.5, 6.0),)))
        expected = np.zeros((4, 4))
        expected[0, 0], expected[1, 1] = -1.0, -2.0
        expected[2:, 2:] = [[-0.5, -6.0], [6.0, -0.5]]
        np.testing.assert_array_equal(D, expected)

    def test_realize_single_real(self):
        m = ModeModel(ModeSpec((0.7,)), ModeShapes([[1.0]], (0,)), [[math.sqrt(0.3)]], [0.0], [0.0])
        sys, B, mu = mode_realize(m)
        np.testing.assert_allclose(sys.A, [[-0.7]])
        np.testing.assert_allclose(sys.K, [[0.3]])
        np.testing.assert_array_equal(B, [[1.0]])

    @pytest.mark.parametrize("tau", LAGS)
    def test_realize_single_complex(self, tau):
        a, w, q = 0.2, 3.0, 0.5
        m = ModeModel(ModeSpec((), ((a, w),)), ModeShapes([[1.0, 0.0]], (0,)), math.sqrt(q) * np.eye(2), [0.0], [0.0])
        c = mode_covariance(m, tau)[0, 0]
        assert c == pytest.approx(q / (2 * a) * math.exp(-a * tau) * math.cos(w * tau), abs=1e-12)

    def test_mode_covariance_negative_lag(self, rng):
        m = _random_model(rng)
        np.testing.assert_allclose(mode_covariance(m, -0.3), mode_covariance(m, 0.3).T, atol=1e-12)

    def test_pin_shapes(self, rng):
        spec = ModeSpec((1.0,), ((0.1, 2.0),))
        B = rng.standard_normal((3, 3))
        Bn, pins, Ts = pin_shapes(B, spec)
        ModeShapes(Bn, pins).check(spec)

    def test_canonical_orders_modes(self, rng):
        m = _random_model(rng, rates=(2.0, 0.5), cplx=((0.3, 4.0), (0.1, 1.0)))
        c = m.canonical()
        assert c.spec.real_rates == (0.5, 2.0)
        assert c.spec.complex_modes == ((0.1, 1.0), (0.3, 4.0))
        for tau in (0.0, 0.5, 2.0):
            np.testing.assert_allclose(mode_covariance(c, tau), mode_covariance(m, tau), atol=1e-10)

    def test_json_round_trip(self, rng):
        m = _random_model(rng)
        back = ModeModel.from_json(m.to_json())
        assert back.spec == m.spec
        np.testing.assert_array_equal(back.B, m.B)
        np.testing.assert_array_equal(back.noise_factor, m.noise_factor)
        np.testing.assert_array_equal(back.meas_noise, m.meas_noise)

    def test_wrong_format(self):
        with pytest.raises(InvalidInput):
            ModeModel.from_dict({"format": "other"})

    def test_log_psd_round_trip(self, rng):
        from conftest import random_psd

        S = random_psd(rng, 4) + 0.1 * np.eye(4)
        np.testing.assert_allclose(psd_from_log(log_from_psd(S)), S, atol=1e-12)


def _random_model(rng, rates=(0.8,), cplx=((0.2, 2.5),), M=3) -> ModeModel:
    spec = ModeSpec(rates, cplx)
    B, pins, _ = pin_shapes(rng.standard_normal((M, spec.dim)), spec)
    L = np.tril(rng.standard_normal((spec.dim, spec.dim)))
    np.fill_diagonal(L, np.abs(np.diag(L)) + 0.1)
    return ModeModel(spec, ModeShapes(B, pins), L, rng.standard_normal(M), 0.01 * np.ones(M))


class TestDimension:
    def test_no_modes(self):
        assert parameter_dimension(0, 0, 1) == 1

    def test_one_real(self):
        assert parameter_dimension(1, 0, 1) == 3

    def test_worked_example(self):
        assert parameter_dimension(2, 1, 10) == 96

    @pytest.mark.parametrize("k", range(1, 13))
    def test_closed_forms(self, k):
        M = 2 * k - 1
        for nr in range(5):
            for nc in range(5):
                N = nr + 2 * nc
                d = parameter_dimension(nr, nc, k)
                assert d == N * (2 * k + (N - 1) / 2) + k
                assert d + (k - 1) == (N + 1) * (M + N / 2)

    def test_invalid(self):
        with pytest.raises(InvalidInput):
            parameter_dimension(0, 0, 0)
