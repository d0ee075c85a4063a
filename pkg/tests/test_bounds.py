import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metabayes.bounds import (BoundConfig, bound_H, bound_H_hat, contraction_radius,
                              local_radius, log_time_grid, meta_window, prior_tail,
                              uniform_tail_zero_time)
from metabayes.errors import InvalidArgument, NonIdentifiable
from metabayes.inference import Grid, Prior
from metabayes.spectral import SpectralSummary

GAMMA_04 = 1.38918796633e-21
G_HAT = 2.02943725152286
S_HAT_04 = 0.817619750174
# direct evaluation of the five-term sum with (2.029, 0.827), t = 1e4, no tail
H_HAT_1E4 = 0.0461282240925


@pytest.fixture(scope="module")
def spec04():
    return SpectralSummary(gamma=GAMMA_04, gamma_hat=G_HAT, lambda_exit=GAMMA_04)


def test_config_validation():
    for bad in (dict(alpha=0.0), dict(alpha=1.0), dict(delta=0.0), dict(C=-1.0),
                dict(C_hat=0.0), dict(c_escape=1.2), dict(eta_threshold=1.0)):
        with pytest.raises(InvalidArgument):
            BoundConfig(**bad)
    with pytest.raises(InvalidArgument):
        BoundConfig.from_dict({"gamma": 1})
    assert BoundConfig.from_dict({"C": 2}).C == 2.0


def test_contraction_radius_examples():
    cfg = BoundConfig()
    assert contraction_radius(2.0, 100.0, cfg) == pytest.approx(1 / (math.sqrt(2) * math.sqrt(10)),
                                                                rel=1e-14)
    assert contraction_radius(2.0, 100.0) == pytest.approx(0.22360679775, rel=1e-11)
    # eps ~ t^{-alpha/2}: a factor 16 in time halves the radius at alpha = 1/2
    assert contraction_radius(2.0, 1600.0) == pytest.approx(0.5 * contraction_radius(2.0, 100.0),
                                                            rel=1e-14)
    assert contraction_radius(2.0, 400.0) == pytest.approx(
        contraction_radius(2.0, 100.0) / math.sqrt(2.0), rel=1e-14)
    with pytest.raises(NonIdentifiable):
        contraction_radius(0.0, 1.0)
    with pytest.raises(InvalidArgument):
        contraction_radius(1.0, 0.0)


def test_local_radius():
    cfg = BoundConfig(alpha=0.5, delta=1.0)
    assert local_radius(4.0, 16.0, cfg) == pytest.approx(4.0, rel=1e-14)


def test_gaussian_tail_quantile():
    # t^{1/4} s^{1/2} delta = 1.959964 with s = 1
    t = 1.959964 ** 4
    assert prior_tail(1.0, t) == pytest.approx(0.0499999981929, rel=1e-9)
    assert prior_tail(1.0, t) == pytest.approx(0.05, abs=1e-8)
    assert prior_tail(2.0, 1e40) == 0.0


def test_uniform_box_tail_vanishes_after_finite_time():
    grid = Grid.regular([(-1, 1)], [41])
    prior = Prior.uniform(grid)
    cfg = BoundConfig()
    t0 = uniform_tail_zero_time(0.8, cfg, 1.0)
    assert prior_tail(0.8, t0 * 1.0001, cfg, prior, [0.0]) == 0.0
    assert prior_tail(0.8, t0 * 0.9, cfg, prior, [0.0]) > 0.0
    ts = np.logspace(-2, 3, 50)
    tails = prior_tail(0.8, ts, cfg, prior, [0.0])
    assert np.all(np.diff(tails) <= 0)
    assert np.all(tails[ts > t0 * 1.0001] == 0.0)


def test_random_prior_tail_is_averaged_and_seeded():
    grid = Grid.regular([(-1, 1)], [41])
    prior = Prior.uniform(grid, hyper_mean_std=0.3, rho_std=0.2)
    a = prior_tail(0.8, 0.5, prior=prior, theta0=[0.0], seed=3)
    b = prior_tail(0.8, 0.5, prior=prior, theta0=[0.0], seed=3)
    assert a == b and 0.0 < a < 1.0
    with pytest.raises(InvalidArgument):
        prior_tail(0.8, 0.5, prior=prior)


def test_H_trivial_sum():
    unit = SpectralSummary(gamma=1.0, gamma_hat=1.0, lambda_exit=0.0)
    assert bound_H(unit, 1.0, 1.0) == pytest.approx(4.0)
    assert bound_H(unit, 1.0, 1.0, BoundConfig(C=2.5)) == pytest.approx(10.0)
    assert bound_H_hat(unit, 1.0, 1.0, tail=0.5) == pytest.approx(4.5)


def test_H_hat_cutoff_example():
    spec = SpectralSummary(gamma=None, gamma_hat=2.029, lambda_exit=0.0)
    got = bound_H_hat(spec, 0.827, 1e4)
    assert got == pytest.approx(H_HAT_1E4, rel=1e-10)
    by_hand = 2.029 ** -0.5 * 1e-2 + 1e-4 / 2.029 + 0.827 ** -4 * 1e-2 + 0.827 ** -3 * 1e-2
    assert got == pytest.approx(by_hand, rel=1e-14)


def test_H_hat_limit():
    spec = SpectralSummary(gamma=None, gamma_hat=1e30, lambda_exit=0.0)
    assert bound_H_hat(spec, 1e30, 10.0) < 1e-14


def test_H_requires_positive_constants(spec04):
    with pytest.raises(InvalidArgument):
        bound_H(SpectralSummary(None, G_HAT, None), 2.0, 1.0)
    with pytest.raises(NonIdentifiable):
        bound_H(spec04, 0.0, 1.0)
    with pytest.raises(InvalidArgument):
        bound_H_hat(SpectralSummary(GAMMA_04, None, None), 1.0, 1.0)


def test_full_system_bound_uninformative(spec04):
    ts = np.logspace(0, math.log10(7.1e20), 300)
    assert np.all(1.0 / (GAMMA_04 * ts) > 1.0)
    assert np.all(np.sqrt(bound_H(spec04, 2.0, ts)) > 1.0)


def test_H_hat_below_H(spec04):
    ts = np.logspace(2, 10, 400)
    assert np.all(bound_H_hat(spec04, S_HAT_04, ts) < bound_H(spec04, 2.0, ts))


@given(st.floats(1e-3, 1e3), st.floats(0.1, 10), st.floats(1.0, 1e6), st.floats(1.0, 100.0))
def test_H_nonincreasing(rate, s1, t, factor):
    spec = SpectralSummary(gamma=rate, gamma_hat=rate, lambda_exit=0.0)
    assert bound_H(spec, s1, t * factor) <= bound_H(spec, s1, t) * (1 + 1e-12)
    assert bound_H(spec, s1, t) >= 0


def test_window_with_no_escape():
    spec = SpectralSummary(gamma=1.0, gamma_hat=1.0, lambda_exit=0.0)
    ts = log_time_grid(1.0, 1e8, 50)
    curve = meta_window(ts, spec, 1.0, 1.0)
    crossing = ts[np.argmax(curve.meta_bound <= 0.5)]
    assert curve.window == (crossing, ts[-1])
    assert np.all(np.diff(curve.meta_bound) < 0)


def test_window_sigma04(spec04):
    curve = meta_window(log_time_grid(), spec04, 2.0, S_HAT_04)
    lo, hi = curve.window
    assert lo <= 1e3 and hi >= 1e19
    i = np.searchsorted(curve.times, 1e4)
    assert curve.meta_bound[i] == pytest.approx(0.21, abs=0.01)
    assert np.all(np.diff(curve.epsilon) < 0)
    assert np.all(np.diff(curve.p_escaped) >= 0)
    assert curve.in_window.sum() == np.sum((curve.times >= lo) & (curve.times <= hi))


def test_window_fig3_right_edge():
    lam = 3.763e-7
    spec = SpectralSummary(gamma=lam, gamma_hat=G_HAT, lambda_exit=lam)
    curve = meta_window(log_time_grid(1.0, 1e10), spec, 2.0, S_HAT_04)
    lo, hi = curve.window
    assert 1e5 < hi < 1e7
    j = np.searchsorted(curve.times, hi)
    assert curve.meta_bound[j] <= 0.5 < curve.meta_bound[j + 1]
    # at the edge the escape term takes what the certainty term leaves under eta
    p_edge = 1 - math.exp(-lam * hi)
    assert p_edge == pytest.approx(0.5 - math.sqrt(curve.H_hat[j]), abs=2e-3)


@pytest.mark.xfail(strict=True, reason="escape term at the right edge is near eta minus the "
                                       "certainty term, not eta/2")
def test_window_fig3_right_edge_half_eta():
    lam = 3.763e-7
    spec = SpectralSummary(gamma=lam, gamma_hat=G_HAT, lambda_exit=lam)
    curve = meta_window(log_time_grid(1.0, 1e10), spec, 2.0, S_HAT_04)
    assert 1 - math.exp(-lam * curve.window[1]) == pytest.approx(0.25, abs=0.05)


def test_meta_window_errors(spec04):
    with pytest.raises(InvalidArgument):
        meta_window([], spec04, 2.0, 1.0)
    with pytest.raises(InvalidArgument):
        meta_window([1.0, 1.0, 2.0], spec04, 2.0, 1.0)
    with pytest.raises(InvalidArgument):
        meta_window([1.0, 2.0], SpectralSummary(GAMMA_04, G_HAT, None), 2.0, 1.0)
    with pytest.raises(InvalidArgument):
        log_time_grid(10.0, 10.0)


def test_no_window_when_threshold_unreachable():
    spec = SpectralSummary(gamma=1e-3, gamma_hat=1e-3, lambda_exit=1.0)
    curve = meta_window(log_time_grid(1.0, 1e3, 20), spec, 0.1, 0.1)
    assert curve.window is None and not curve.in_window.any()


@settings(max_examples=40)
@given(st.floats(-12, -2), st.floats(0.3, 5.0), st.floats(0.3, 5.0), st.floats(0.5, 1.1))
def test_meta_bound_quasi_convex(log_lam, g_hat, s_hat, c):
    spec = SpectralSummary(gamma=1.0, gamma_hat=g_hat, lambda_exit=10 ** log_lam)
    curve = meta_window(log_time_grid(1.0, 1e14, 20), spec, 1.0, s_hat, BoundConfig(c_escape=c))
    # once the escape term saturates near c the certainty term pulls the sum down again;
    # the shape claim is about the stretch where escape is still below the threshold
    live = curve.p_escaped <= 0.5
    d = np.diff(curve.meta_bound[live])
    tol = 1e-12 * curve.meta_bound.max()
    ups = np.nonzero(d > tol)[0]
    if ups.size:
        assert np.all(d[ups[0]:] >= -tol)


@given(st.floats(1e-4, 1e2), st.floats(0.2, 5.0))
def test_structural_coincidence(rate, s):
    spec = SpectralSummary(gamma=rate, gamma_hat=rate, lambda_exit=0.0)
    curve = meta_window(log_time_grid(1.0, 1e6, 10), spec, s, s)
    np.testing.assert_allclose(np.sqrt(curve.H), curve.meta_bound, rtol=1e-14)


@given(st.floats(0.01, 100.0))
def test_linear_scaling_in_constants(scale):
    spec = SpectralSummary(gamma=0.5, gamma_hat=2.0, lambda_exit=1e-6)
    ts = log_time_grid(1.0, 1e6, 10)
    base = meta_window(ts, spec, 1.0, 0.8)
    big = meta_window(ts, spec, 1.0, 0.8, BoundConfig(C=scale, C_hat=scale))
    np.testing.assert_allclose(big.H, scale * base.H, rtol=1e-13)
    np.testing.assert_allclose(big.H_hat, scale * base.H_hat, rtol=1e-13)
    assert np.all(big.meta_bound >= 0)


def test_log_time_grid_density():
    g = log_time_grid(1.0, 1e25)
    assert g[0] == 1.0 and g[-1] == pytest.approx(1e25, rel=1e-12)
    assert g.size == 25 * 400 + 1
