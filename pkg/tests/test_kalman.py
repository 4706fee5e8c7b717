import math
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mode_sleuth import kalman
from mode_sleuth.data import ChannelData
from mode_sleuth.errors import InvalidTimes, NotPsd
from mode_sleuth.estimator import Chart
from mode_sleuth.kalman import (
    FilterState,
    ObservationRecord,
    SystemGradient,
    batch_evidence,
    dense_gp_loglik,
    init_stationary,
    merge_simultaneous,
    predict,
    run_filter,
    run_filter_fast,
    step,
    step_with_gradient,
    update,
)
from mode_sleuth.model import OU, LtiSystem, ModeModel, ModeShapes, ModeSpec, mode_realize
from mode_sleuth.simulator import observe_channels, sample_path, uniform_times

from conftest import mode_records, random_psd, random_records, random_stable

LOG_2PI = math.log(2 * math.pi)
seeds = st.integers(0, 2**31 - 1)


def scalar_record(t, y, H=0.0):
    return ObservationRecord(t, np.array([y]), np.array([[1.0]]), np.zeros(1), np.array([[H]]))


class TestInitAndPredict:
    def test_ou(self):
        st_ = init_stationary(OU(1.0, math.sqrt(2)).realize())
        np.testing.assert_allclose(st_.x, [0.0])
        np.testing.assert_allclose(st_.P, [[1.0]])

    def test_noiseless_system(self):
        st_ = init_stationary(LtiSystem(-np.eye(2), np.zeros((2, 2))))
        np.testing.assert_array_equal(st_.P, np.zeros((2, 2)))

    def test_rotation_block(self):
        a, w, q = 0.4, 1.5, 0.6
        st_ = init_stationary(LtiSystem([[-a, -w], [w, -a]], q * np.eye(2)))
        np.testing.assert_allclose(st_.P, q / (2 * a) * np.eye(2), atol=1e-14)

    def test_small_interval(self, rng):
        sys = LtiSystem(random_stable(rng, 3), random_psd(rng, 3))
        st_ = FilterState(0.0, rng.standard_normal(3), random_psd(rng, 3))
        x, P = predict(st_, sys, 1e-9)
        np.testing.assert_allclose(x, st_.x, rtol=1e-6)
        np.testing.assert_allclose(P, st_.P, rtol=1e-6)

    def test_nonpositive_interval(self):
        st_ = init_stationary(OU(1.0, 1.0).realize())
        with pytest.raises(InvalidTimes):
            predict(st_, OU(1.0, 1.0).realize(), 0.0)


class TestUpdate:
    def test_scalar_hand(self):
        x, P, rep = update(np.zeros(1), np.eye(1), np.eye(1), np.zeros(1), np.eye(1), np.ones(1))
        np.testing.assert_allclose(rep.gain, [[0.5]])
        np.testing.assert_allclose(x, [0.5])
        np.testing.assert_allclose(P, [[0.5]])
        assert rep.eps == pytest.approx(-0.5 * (0.5 + math.log(2) + LOG_2PI), rel=1e-15)

    def test_uninformative(self, rng):
        P0 = random_psd(rng, 3)
        H = 1e12 * np.eye(2)
        Z = rng.standard_normal((2, 3))
        x, P, rep = update(np.zeros(3), P0, Z, np.zeros(2), H, rng.standard_normal(2))
        np.testing.assert_allclose(P, P0, rtol=1e-6)
        expected = -0.5 * (np.linalg.slogdet(H)[1] + 2 * LOG_2PI)
        assert rep.eps == pytest.approx(expected, rel=1e-6)

    def test_jitter_only_when_needed(self):
        _, _, rep = update(np.zeros(1), np.eye(1), np.eye(1), np.zeros(1), np.zeros((1, 1)), np.ones(1))
        assert rep.jitter == 0.0
        # two identical noiseless channels make F singular
        Z = np.array([[1.0], [1.0]])
        _, _, rep = update(np.zeros(1), np.eye(1), Z, np.zeros(2), np.zeros((2, 2)), np.ones(2))
        assert rep.jitter > 0


class TestEvidence:
    def test_zero_records(self):
        assert batch_evidence(OU(1.0, 1.0).realize(), []) == 0.0

    def test_two_ou_records(self):
        sys = OU(1.0, math.sqrt(2)).realize()
        recs = [scalar_record(0.0, 0.3), scalar_record(1.0, -0.2)]
        C = np.array([[1.0, math.exp(-1)], [math.exp(-1), 1.0]])
        y = np.array([0.3, -0.2])
        ref = -0.5 * (y @ np.linalg.solve(C, y) + np.linalg.slogdet(C)[1] + 2 * LOG_2PI)
        assert batch_evidence(sys, recs) == pytest.approx(ref, abs=1e-10)
        assert dense_gp_loglik(sys, recs) == pytest.approx(ref, abs=1e-10)

    def test_single_scalar(self):
        sys = LtiSystem([[-1.0]], [[2 * 1.7]], [0.0])
        rec = ObservationRecord(0.0, np.array([2.0]), np.eye(1), np.array([0.5]), np.zeros((1, 1)))
        expected = -0.5 * (1.5**2 / 1.7 + math.log(1.7) + LOG_2PI)
        assert dense_gp_loglik(sys, [rec]) == pytest.approx(expected, rel=1e-14)

    def test_independent_limit(self, rng):
        sys = LtiSystem([[-50.0]], [[100.0]])
        ys = rng.standard_normal(10)
        recs = [scalar_record(10.0 * i, y) for i, y in enumerate(ys)]
        indep = float(np.sum(-0.5 * (ys**2 + LOG_2PI)))
        assert dense_gp_loglik(sys, recs) == pytest.approx(indep, rel=1e-6)
        assert batch_evidence(sys, recs) == pytest.approx(indep, rel=1e-6)

    def test_dense_not_psd(self):
        sys = LtiSystem([[-1.0]], [[2.0]])
        recs = [ObservationRecord(0.0, np.zeros(2), np.ones((2, 1)), np.zeros(2), np.zeros((2, 2)))]
        with pytest.raises(NotPsd):
            dense_gp_loglik(sys, recs)

    def test_large_stream(self, rng):
        sys = LtiSystem(random_stable(rng, 5), random_psd(rng, 5))
        recs = random_records(rng, sys, 200)
        L = batch_evidence(sys, recs)
        assert abs(L - dense_gp_loglik(sys, recs)) < 1e-8 * max(1.0, abs(L))

    @given(seeds, st.integers(1, 6), st.integers(10, 60))
    def test_oracle_equivalence(self, seed, n, n_records):
        rng = np.random.default_rng(seed)
        sys = LtiSystem(random_stable(rng, n), random_psd(rng, n))
        recs = random_records(rng, sys, n_records)
        L = batch_evidence(sys, recs)
        assert abs(L - dense_gp_loglik(sys, recs)) < 1e-8 * max(1.0, abs(L))

    @given(seeds, st.integers(1, 5))
    def test_fast_path_agrees(self, seed, n):
        rng = np.random.default_rng(seed)
        sys = LtiSystem(random_stable(rng, n), random_psd(rng, n), rng.standard_normal(n))
        recs = random_records(rng, sys, 40)
        ref = run_filter(sys, recs, forget=0.3)
        fast = run_filter_fast(sys, recs, forget=0.3)
        assert fast.L == pytest.approx(ref.L, rel=1e-10, abs=1e-10)
        assert fast.L_disc == pytest.approx(ref.L_disc, rel=1e-10, abs=1e-10)
        np.testing.assert_allclose(fast.P, ref.P, atol=1e-10)

    def test_out_of_order(self):
        sys = OU(1.0, 1.0).realize()
        st_, _ = step(init_stationary(sys), sys, scalar_record(1.0, 0.0))
        with pytest.raises(InvalidTimes):
            step(st_, sys, scalar_record(0.5, 0.0))

    def test_covariance_stays_psd(self, rng):
        sys = LtiSystem(random_stable(rng, 4, margin=0.01), random_psd(rng, 4, rank=2))
        recs = random_records(rng, sys, 2000, noise=1e-6)
        worst = [0.0]

        def check(state, rep):
            assert np.array_equal(state.P, state.P.T)
            worst[0] = min(worst[0], np.linalg.eigvalsh(state.P)[0] / max(np.trace(state.P), 1e-300))

        run_filter(sys, recs, on_step=check)
        assert worst[0] >= -1e-9


class TestDiscounting:
    def test_no_forgetting(self, rng):
        sys = LtiSystem(random_stable(rng, 2), random_psd(rng, 2))
        s = run_filter(sys, random_records(rng, sys, 30), forget=0.0)
        assert s.L_disc == s.L

    def test_infinite_forgetting(self, rng):
        sys = LtiSystem(random_stable(rng, 2), random_psd(rng, 2))
        eps = []
        s = run_filter(sys, random_records(rng, sys, 30), forget=1e6, on_step=lambda st_, rep: eps.append(rep.eps))
        assert s.L_disc == pytest.approx(eps[-1], rel=1e-12)

    def test_three_records(self):
        sys = OU(1.0, 1.0).realize()
        eps = []
        s = run_filter(sys, [scalar_record(t, y) for t, y in [(1.0, 0.2), (2.0, -0.4), (3.0, 0.1)]],
                       forget=0.5, on_step=lambda st_, rep: eps.append(rep.eps))
        direct = sum(math.exp(-0.5 * (3.0 - t)) * e for t, e in zip([1.0, 2.0, 3.0], eps))
        assert abs(s.L_disc - direct) < 1e-12

    @given(seeds, st.floats(0.01, 5.0))
    def test_direct_sum(self, seed, lam):
        rng = np.random.default_rng(seed)
        sys = LtiSystem(random_stable(rng, 2), random_psd(rng, 2))
        recs = random_records(rng, sys, 50)
        eps = []
        s = run_filter(sys, recs, forget=lam, on_step=lambda st_, rep: eps.append(rep.eps))
        t = np.array([r.t for r in recs])
        direct = float(np.sum(np.exp(-lam * (t[-1] - t)) * np.array(eps)))
        assert abs(s.L_disc - direct) < 1e-12 * max(1.0, abs(direct))


class TestStacking:
    def test_permutation_invariance(self, rng):
        sys = LtiSystem(random_stable(rng, 3), random_psd(rng, 3))
        recs = random_records(rng, sys, 30, n_obs_max=4)
        perm = []
        for r in recs:
            p = rng.permutation(r.d)
            perm.append(ObservationRecord(r.t, r.y[p], r.Z[p], r.m[p], r.H[np.ix_(p, p)]))
        assert batch_evidence(sys, perm) == pytest.approx(batch_evidence(sys, recs), rel=1e-12)

    def test_merge_equals_block(self, rng):
        sys = LtiSystem(random_stable(rng, 2), random_psd(rng, 2))
        a = ObservationRecord(1.0, np.array([0.3]), np.array([[1.0, 0.0]]), np.zeros(1), np.array([[0.1]]))
        b = ObservationRecord(1.0, np.array([-0.2]), np.array([[0.0, 1.0]]), np.zeros(1), np.array([[0.2]]))
        merged = merge_simultaneous([a, b])
        assert len(merged) == 1 and merged[0].d == 2
        assert batch_evidence(sys, merged) == pytest.approx(dense_gp_loglik(sys, [a, b]), rel=1e-12)


def _ou_stream(n=50, seed=0):
    sys = OU(0.8, 1.2).realize()
    path = sample_path(sys, uniform_times(n, 0.3), seed=seed)
    rng = np.random.default_rng(seed + 1)
    return [scalar_record(float(t), float(x[0] + 0.1 * rng.standard_normal()), 0.01) for t, x in zip(path.times, path.states)]


class TestGradient:
    def test_noise_scale(self):
        recs = _ou_stream()
        mu = 0.8

        def L(q):
            return batch_evidence(LtiSystem([[-mu]], [[q]]), recs)

        q = 1.44
        dsys = SystemGradient(np.zeros((1, 1, 1)), np.ones((1, 1, 1)))
        g = run_filter(LtiSystem([[-mu]], [[q]]), recs, dsys).dL[0]
        h = 1e-5 * q
        fd = (L(q + h) - L(q - h)) / (2 * h)
        assert g == pytest.approx(fd, rel=1e-5)

    def test_dummy_parameter(self):
        recs = _ou_stream()
        sys = OU(0.8, 1.2).realize()
        dsys = SystemGradient(np.zeros((2, 1, 1)), np.stack([np.ones((1, 1)), np.zeros((1, 1))]))
        s = run_filter(sys, recs, dsys, forget=0.2)
        assert s.dL[1] == 0.0 and s.dL_disc[1] == 0.0

    def test_discounted_gradient_direct_sum(self):
        recs = _ou_stream()
        sys = OU(0.8, 1.2).realize()
        dsys = SystemGradient(-np.ones((1, 1, 1)), np.zeros((1, 1, 1)))
        deps = []
        s = run_filter(sys, recs, dsys, forget=0.7, on_step=lambda st_, rep: deps.append(rep.d_eps[0]))
        t = np.array([r.t for r in recs])
        assert s.dL_disc[0] == pytest.approx(float(np.sum(np.exp(-0.7 * (t[-1] - t)) * deps)), rel=1e-12)

    def test_mode_model_all_classes(self):
        max_err, classes = mode_gradient_check(seed=3)
        assert max_err < 1e-4
        assert {"log_alpha", "log_omega", "B", "log_Lambda_diag", "Lambda_off", "mean", "log_noise"} <= classes

    def test_fast_gradient_matches_reference(self):
        chart, theta, data = _mode_problem(seed=4, n=60)
        sys, dsys, recs = mode_records(chart, theta, data)
        ref = run_filter(sys, recs, dsys, forget=0.1)
        fast = run_filter_fast(sys, recs, dsys, forget=0.1)
        np.testing.assert_allclose(fast.dL, ref.dL, rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(fast.dL_disc, ref.dL_disc, rtol=1e-9, atol=1e-9)


def _mode_problem(seed=0, n=100, real=False):
    rng = np.random.default_rng(seed)
    spec = ModeSpec((0.6,) if real else (), ((0.3, 2.0),))
    N = spec.dim
    B = np.zeros((2, N))
    B[0, -2:] = [1.0, 0.0]
    B[1, -2:] = [0.6, -0.4]
    if real:
        B[:, 0] = [0.5, 1.0]
    pins = ((1,) if real else ()) + (0,)
    L = np.tril(0.3 * rng.standard_normal((N, N))) + 0.8 * np.eye(N)
    model = ModeModel(spec, ModeShapes(B, pins), L, [0.2, -0.1], [0.05, 0.08])
    path = sample_path(mode_realize(model)[0], uniform_times(n, 0.1), seed=seed)
    mask = rng.uniform(size=(n, 2)) > 0.2
    Y = observe_channels(path, B, model.channel_means, [0.05, 0.08], seed=seed + 1, mask=mask)
    data = ChannelData(path.times, Y)
    chart = Chart(spec.n_real, spec.n_complex, 2, pins)
    return chart, chart.pack(model), data


def mode_gradient_check(seed=0, n=100, real=False):
    """Max relative error of the recursive gradient against central differences."""
    chart, theta, data = _mode_problem(seed, n, real)
    sys, dsys, recs = mode_records(chart, theta, data)
    state = init_stationary(sys, dsys)
    for r in recs:
        state, _ = step_with_gradient(state, sys, dsys, r)
    g = state.dL

    def L(th):
        s, _, rr = mode_records(chart, th, data)
        return batch_evidence(s, rr)

    kinds = chart.kinds()
    err = 0.0
    for p in range(chart.dim):
        h = 1e-5 * max(1.0, abs(theta[p]))
        e = np.zeros(chart.dim)
        e[p] = h
        fd = (L(theta + e) - L(theta - e)) / (2 * h)
        err = max(err, abs(g[p] - fd) / max(abs(fd), 1e-3))
    return err, set(kinds)


def test_real_mode_gradient():
    err, classes = mode_gradient_check(seed=5, n=60, real=True)
    assert "log_lambda" in classes
    assert err < 1e-4


def test_constant_step_cost():
    sys = LtiSystem(random_stable(np.random.default_rng(0), 4), np.eye(4))
    rng = np.random.default_rng(1)
    recs = random_records(rng, sys, 200)
    prop = kalman._Propagator(sys)
    for a, b in zip(recs, recs[1:]):  # warm the discretisation cache
        prop(b.t - a.t)
    state = init_stationary(sys)
    times = []
    for r in recs:
        t0 = time.perf_counter()
        state, _ = step(state, sys, r, 0.1, prop)
        times.append(time.perf_counter() - t0)
    # median per block is robust to scheduler hiccups on a shared CPU
    ratio = np.median(times[150:]) / np.median(times[:50])
    assert ratio <= 1.2
