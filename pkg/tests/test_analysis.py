import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from slimfl import analysis as an
from slimfl import slimnet as sn
from slimfl.errors import DegenerateLinkError, InvalidParameterError
from slimfl.metrics import MetricsSeries, RoundRecord
from slimfl.rng import stream

probs = st.floats(0.05, 1.0)


def make_series(acc_full, comm=199.526, flops=100, bits=(0, 172_688, 0)):
    s = MetricsSeries()
    for i, a in enumerate(acc_full, start=1):
        s.append(RoundRecord(i, 1.0, 1.0, a, a, 1, 1, bits[0], bits[1], bits[2], comm, flops))
    return s


class TestVariance:
    def test_full_batch_is_zero(self):
        f = lambda idx: np.array([float(np.mean(idx)), 1.0])
        assert an.sample_variance(f, 5, 5, 10, stream(0, "v")) == 0.0

    def test_identical_samples(self):
        m = sn.build_ul_mobilenet(0)
        x = np.repeat(stream(0, "v").uniform(size=(1, 4, 4)), 6, axis=0)
        y = np.full(6, 3)
        assert an.estimate_local_variance(m, x, y, batch_size=2, trials=8) == pytest.approx(0.0, abs=1e-25)

    def test_two_point_closed_form(self):
        ga, gb = np.array([1.0, -2.0, 0.5]), np.array([-1.0, 0.0, 2.5])
        f = lambda idx: np.mean(np.stack([ga, gb])[idx], axis=0)
        est = an.sample_variance(f, 2, 1, 20_000, stream(1, "v"))
        # each single draw is off the mean by (g_a - g_b)/2
        assert est == pytest.approx(np.sum((ga - gb) ** 2) / 4, rel=1e-12)

    def test_non_iidness(self):
        assert an.non_iidness([1.0, 2.0, 3.0]) == 2.0

    def test_rejects_empty(self):
        with pytest.raises(InvalidParameterError):
            an.sample_variance(lambda i: i, 0, 1, 1, stream(0, "v"))


class TestGradientVarianceBound:
    def test_values(self):
        assert an.gradient_variance_bound(0.0, 0.5, 0.4, (0.5, 0.5)) == 0.0
        assert an.gradient_variance_bound(1.0, 1.0, 1.0, (0.5, 0.5)) == 4.0

    def test_degenerate(self):
        with pytest.raises(DegenerateLinkError):
            an.gradient_variance_bound(1.0, 0.5, 0.0, (0.5, 0.5))

    @given(st.floats(0.0, 10.0), probs, probs, st.floats(0.0, 1.0))
    def test_monotone(self, delta, p1, p2, w1):
        w = (w1, 1 - w1)
        b = an.gradient_variance_bound(delta, p1, p2, w)
        assert an.gradient_variance_bound(delta, min(1.0, p1 * 1.1), p2, w) <= b
        assert an.gradient_variance_bound(delta, p1, min(1.0, p2 * 1.1), w) <= b
        assert an.gradient_variance_bound(delta + 1.0, p1, p2, w) >= b

    def test_weight_grid_minimum(self):
        grid = an.st_weight_grid(101)
        B = np.array([an.gradient_variance_bound(1.0, 0.8, 0.6, w) for w in grid])
        best = np.flatnonzero(B == B.min())
        assert best.tolist() == [50]
        np.testing.assert_array_equal(grid[50], [0.5, 0.5])
        assert float(np.sum(grid[50] ** 2)) == 0.5

    @given(st.floats(0.0, 1.0))
    def test_cauchy_schwarz(self, w1):
        w = np.array([w1, 1 - w1])
        assert np.sum(w**2) >= 0.5 - 1e-15


class TestBound:
    params = an.BoundParams(L=4.0, mu=1.0, delta=1.0, p1=0.9, p2=0.7, Delta1=2.0)

    def test_formula(self):
        p = self.params
        expected = 4.0 * (1 * 4 * 2 + 2 * p.B) / (1 * 7 + 8 - 1)
        assert an.convergence_bound(7, p) == pytest.approx(expected, rel=1e-14)
        assert p.kappa == 4.0

    def test_vanishes(self):
        assert an.convergence_bound(1e9, self.params) < 1e-6 * an.convergence_bound(1, self.params)

    def test_schedule(self):
        assert an.step_size(1, 4.0, 1.0) == pytest.approx(0.25, rel=1e-15)
        an.check_step_size(float(an.step_size(1, 4.0, 1.0)), 4.0)
        with pytest.raises(InvalidParameterError):
            an.check_step_size(0.26, 4.0)
        eta = an.step_size(np.arange(1, 100), 4.0, 1.0)
        assert np.all(np.diff(eta) < 0) and np.all(eta <= 0.25)

    def test_monotone(self):
        t = np.arange(1, 1000)
        b = an.convergence_bound(t, self.params)
        assert np.all(np.diff(b) < 0)
        bigger_B = an.BoundParams(4.0, 1.0, 2.0, 0.9, 0.7, Delta1=2.0)
        bigger_D = an.BoundParams(4.0, 1.0, 1.0, 0.9, 0.7, Delta1=3.0)
        assert np.all(an.convergence_bound(t, bigger_B) > b)
        assert np.all(an.convergence_bound(t, bigger_D) > b)

    def test_rejects(self):
        with pytest.raises(InvalidParameterError):
            an.convergence_bound(0, self.params)
        for kw in (dict(L=0.5), dict(p2=0.95), dict(w=(0.6, 0.6)), dict(delta=-1.0)):
            with pytest.raises(InvalidParameterError):
                an.BoundParams(**{**dict(L=4.0, mu=1.0, delta=1.0, p1=0.9, p2=0.7), **kw})


class TestFleet:
    def test_known_constants(self):
        f = an.default_fleet(0)
        w1, w2 = f.w
        H = (w1 * f.xi1 + w2) * f.h
        assert f.L == H.max() and f.mu == H.min()
        assert f.delta == pytest.approx(f.sigma2.mean())
        assert f.gap(f.theta_star) == 0.0

    def test_aggregated_gradient_unbiased(self):
        f = an.default_fleet(1)
        theta = f.theta_star + 0.3
        g = f.aggregated_gradient(np.broadcast_to(theta, (50_000, f.dim)), stream(2, "g"))
        target = f.composite_hessian * (theta - f.theta_star)
        se = g.std(axis=0, ddof=1) / np.sqrt(g.shape[0])
        assert np.all(np.abs(g.mean(axis=0) - target) <= 4 * se)

    def test_per_round_recursion(self):
        # E|theta_{t+1} - theta*|^2 <= (1 - eta_t mu) |theta_t - theta*|^2 + eta_t^2 B, conditional on theta_t
        f = an.default_fleet(0)
        th1 = f.theta_star + 1 / np.sqrt(f.dim)
        B = f.bound_params(th1).B
        trials, T, draws = 1000, 500, 200
        ts = stream(0, "rec-t").integers(1, T + 1, trials)
        eta = an.step_size(np.arange(1, T + 1), f.L, f.mu)
        theta = np.broadcast_to(th1, (trials, f.dim)).copy()
        states = np.empty_like(theta)
        for i in range(T):
            hit = ts == i + 1
            states[hit] = theta[hit]
            theta = theta - eta[i] * f.aggregated_gradient(theta, stream(0, "rec", i))
        ratios = np.empty(trials)
        for c in range(0, trials, 100):
            s, e = states[c:c + 100], eta[ts[c:c + 100] - 1]
            rep = np.repeat(s, draws, axis=0)
            nxt = rep - np.repeat(e, draws)[:, None] * f.aggregated_gradient(rep, stream(0, "rec-mc", c))
            d1 = np.sum((nxt - f.theta_star) ** 2, axis=1).reshape(-1, draws).mean(axis=1)
            d0 = np.sum((s - f.theta_star) ** 2, axis=1)
            ratios[c:c + 100] = d1 / ((1 - e * f.mu) * d0 + e * e * B)
        assert np.mean(ratios <= 1.0) >= 0.99

    def test_short_theorem_run(self):
        check = an.run_theorem_trials(an.default_fleet(3), trials=20, T=500, seed=3)
        assert check.pass_fraction >= 0.99
        assert check.bound.shape == (500,)
        assert check.mean_gap[-1] < check.mean_gap[0]


class TestReports:
    def test_comm_power(self):
        P = 10**2.3
        assert an.comm_power("slimfl", P) == pytest.approx(199.5, abs=0.1)
        assert an.comm_power("vanilla_1.5x", P) == pytest.approx(399.1, abs=0.1)
        with pytest.raises(InvalidParameterError):
            an.comm_power("x", P)

    def test_energy_linear_in_rounds(self):
        s = make_series([1.0] * 10)
        a, b = an.energy_entry(s, 10), an.energy_entry(s, 20)
        assert b.total_comm_mW == pytest.approx(2 * a.total_comm_mW)
        assert b.total_flops == 2 * a.total_flops

    def test_energy_report(self):
        runs = {"slimfl": make_series([1.0] * 150), "vanilla_1.0x": make_series([0.5] * 150)}
        rep = an.energy_report(runs)
        assert rep["slimfl"].rounds_to_convergence == 100
        assert rep["slimfl"].total_comm_mW == pytest.approx(100 * 199.526)
        assert rep["vanilla_1.0x"].total_comm_mW is None

    def test_per_epoch_flops(self):
        per_epoch = sn.count_flops(sn.UL_MOBILENET, 1) + sn.count_flops(sn.UL_MOBILENET, 2)
        # reported against the published 3.56 M, not gated
        assert per_epoch == 4_102_848

    def test_bits_ideal_channel(self):
        R = 7
        s = make_series([0.9] * R, bits=(0, 10 * 172_688, 0))
        rep = an.bits_report(s)
        assert rep["decoded_full_MB"] == pytest.approx(R * 10 * 172_688 / 8e6)
        assert rep["dropped_MB"] == 0.0
        assert rep["attempted_MB"] == rep["decoded_half_MB"] + rep["decoded_full_MB"] + rep["dropped_MB"]

    def test_bits_no_rh(self):
        s = make_series([0.9] * 3, bits=(86_344, 0, 172_688 + 86_344))
        assert an.bits_report(s)["decoded_full_MB"] == 0.0


class TestConvergenceDetector:
    def test_constant_series(self):
        assert an.detect_convergence([1.0] * 150) == 100
        assert an.detect_convergence([0.5] * 150) is None

    def test_crafted(self):
        tail = [0.70, 0.95] * 60
        assert np.std(tail[:100]) == pytest.approx(0.125)
        assert an.detect_convergence(tail) is None
        assert an.detect_convergence([0.85] * 99 + tail) == 100

    def test_short_series(self):
        assert an.detect_convergence([1.0] * 99) is None
        with pytest.raises(InvalidParameterError):
            an.detect_convergence([1.0], window=0)

    def test_population_std(self):
        # window of 2: values 0.75/0.9 have population std 0.075 > 0.072, sample std would be larger still
        assert an.detect_convergence([0.75, 0.9], window=2) is None
        assert an.detect_convergence([0.8, 0.9], window=2) == 2
