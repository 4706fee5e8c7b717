import io
import math

import numpy as np
import pytest
import scipy.optimize
from hypothesis import given
from hypothesis import strategies as st

from mode_sleuth import spectral
from mode_sleuth.errors import InsufficientBand, InvalidInput, NonUniform
from mode_sleuth.model import FOU, OU
from mode_sleuth.simulator import sample_path, uniform_times
from mode_sleuth.spectral import Periodogram, hann_window, loglog_slope, periodogram, second_order_psd, welch


class TestHann:
    def test_three(self):
        np.testing.assert_allclose(hann_window(3), [0.0, 1.0, 0.0], atol=1e-16)

    def test_five(self):
        np.testing.assert_allclose(hann_window(5), [0.0, 0.5, 1.0, 0.5, 0.0], atol=1e-16)

    def test_mean(self):
        assert abs(hann_window(10_000).mean() - 0.5) < 1e-3

    def test_too_short(self):
        with pytest.raises(InvalidInput):
            hann_window(1)


class TestPeriodogram:
    def test_sinusoid_peak(self):
        n, dt = 1024, 0.1
        f0 = 50 / (n * dt)
        t = np.arange(n) * dt
        pg = periodogram(3.0 * np.sin(2 * np.pi * f0 * t), dt)
        assert pg.freqs[np.argmax(pg.power)] == pytest.approx(f0)

    @given(st.integers(0, 2**31 - 1), st.sampled_from(["hann", "boxcar"]), st.integers(64, 3000))
    def test_parseval_exact(self, seed, window, n):
        x = np.random.default_rng(seed).standard_normal(n)
        dt = 0.05
        pg = periodogram(x, dt, window=window)
        w = hann_window(n) if window == "hann" else np.ones(n)
        weighted = np.sum((w * (x - x.mean())) ** 2) / np.sum(w * w)
        assert pg.total_power() == pytest.approx(weighted, rel=1e-10)

    def test_parseval_variance(self):
        x = np.random.default_rng(1).standard_normal(200_000)
        assert periodogram(x, 0.01).total_power() == pytest.approx(np.var(x), rel=0.01)

    def test_white_level_and_slope(self):
        dt = 0.1
        x = np.random.default_rng(2).normal(0, 2.0, 50_000)
        pg = welch(x, dt)
        mid = (pg.freqs > 0.5) & (pg.freqs < 4.5)
        assert np.mean(pg.power[mid]) == pytest.approx(2 * 4.0 * dt, rel=0.05)
        assert abs(loglog_slope(periodogram(x, dt), (0.05, 2.5)).slope) < 0.1

    def test_nonuniform(self):
        t = np.cumsum(np.random.default_rng(0).uniform(0.05, 0.15, 100))
        with pytest.raises(NonUniform):
            periodogram(np.zeros(100), times=t)

    def test_missing(self):
        x = np.zeros(100)
        x[5] = np.nan
        with pytest.raises(NonUniform):
            periodogram(x, 0.1)

    def test_ou_slope(self):
        mu, dt = 0.1, 0.1
        x = sample_path(OU(mu, 1.0).realize(), uniform_times(100_000, dt), seed=3).states[:, 0]
        nyq = 0.5 / dt
        fit = loglog_slope(periodogram(x, dt), (10 * mu / (2 * np.pi), nyq / 4))
        assert abs(fit.slope + 2) < 0.3

    def test_ou_ensemble_lorentzian(self):
        mu, sigma, dt, n = 0.5, 1.0, 0.1, 2048
        sys = OU(mu, sigma).realize()
        acc = None
        for seed in range(50):
            x = sample_path(sys, uniform_times(n, dt), seed=seed).states[:, 0]
            p = welch(x, dt).power
            acc = p if acc is None else acc + p
        pg = welch(x, dt)
        avg = acc / 50
        theory = spectral.ou_psd(mu, sigma)(pg.freqs)
        # exact-in-distribution sampling is aliased: fold in the images
        fs = 1 / dt
        for m in range(1, 50):
            theory = theory + spectral.ou_psd(mu, sigma)(m * fs - pg.freqs) + spectral.ou_psd(mu, sigma)(m * fs + pg.freqs)
        band = (pg.freqs > 2 * mu / (2 * np.pi)) & (pg.freqs < 0.25 / dt)
        rms = np.sqrt(np.mean((avg[band] / theory[band] - 1) ** 2))
        assert rms < 0.10


class TestSlope:
    def test_exact_power_law(self):
        f = np.linspace(0, 10, 501)
        p = np.ones_like(f)
        p[1:] = f[1:] ** -2.0
        fit = loglog_slope(Periodogram(f, p, "none", 1.0), (0.1, 5.0))
        assert abs(fit.slope + 2) < 1e-6

    def test_insufficient(self):
        f = np.linspace(0, 10, 11)
        with pytest.raises(InsufficientBand):
            loglog_slope(Periodogram(f, np.ones(11), "none", 1.0), (1.0, 3.0))

    def test_white_noise(self):
        x = np.random.default_rng(5).standard_normal(20_000)
        assert abs(loglog_slope(periodogram(x, 1.0), (0.01, 0.4)).slope) < 0.2

    @pytest.mark.slow
    def test_fou_two_slopes(self):
        G, J, dt = 1 / math.e, math.e**2, 0.01
        x = sample_path(FOU(1.0, G, J, 1.0).realize(), uniform_times(200_000, dt), seed=9).states[:, 1]
        pg = periodogram(x, dt)
        low = loglog_slope(pg, (2 * G / (2 * np.pi), J / (4 * 2 * np.pi)))
        high = loglog_slope(pg, (2 * J / (2 * np.pi), 0.5 / dt / 4))
        assert abs(low.slope + 2) < 0.3
        assert abs(high.slope + 4) < 0.4


class TestSecondOrder:
    def velocity(self, beta):
        psd = second_order_psd(1.0, beta, 1.0)
        return lambda W: W**2 * psd(W)

    def test_peak(self):
        v = self.velocity(0.2)
        res = scipy.optimize.minimize_scalar(lambda W: -v(W), bounds=(0.5, 1.5), method="bounded", options={"xatol": 1e-10})
        assert res.x == pytest.approx(1.0, abs=1e-6)

    def test_fwhm(self):
        v = self.velocity(0.2)
        half = 0.5 * v(1.0)
        lo = scipy.optimize.brentq(lambda W: v(W) - half, 0.5, 1.0, xtol=1e-14)
        hi = scipy.optimize.brentq(lambda W: v(W) - half, 1.0, 1.5, xtol=1e-14)
        assert hi - lo == pytest.approx(0.2, abs=1e-6)

    def test_resonance_limit(self):
        heights = [second_order_psd(1.0, b, 1.0)(1.0) for b in (1e-2, 1e-3)]
        assert heights[1] / heights[0] == pytest.approx(100.0, rel=1e-12)


def test_csd_diagonal_matches_welch():
    Y = np.random.default_rng(7).standard_normal((4096, 2))
    freqs, C = spectral.cross_spectral_matrix(Y, 0.1)
    pg = welch(Y[:, 1], 0.1)
    np.testing.assert_allclose(C[:, 1, 1].real, pg.power, rtol=1e-12)
    np.testing.assert_allclose(C, np.conj(np.swapaxes(C, 1, 2)), atol=1e-14)


def test_csv_round_trip():
    buf = io.StringIO("t,x,y\n0,1.0,2\n0.1,,3\n")
    t, v, name = spectral.read_series_csv(buf, "y")
    assert name == "y" and v.tolist() == [2.0, 3.0]
    out = io.StringIO()
    spectral.write_periodogram_csv(out, Periodogram(np.array([0.0, 1.0]), np.array([2.0, 3.0]), "hann", 1.0))
    assert out.getvalue().splitlines()[0] == "freq_hz,power"
