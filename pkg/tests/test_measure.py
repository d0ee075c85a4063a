import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from metabayes import dynamics as dyn
from metabayes.errors import InvalidExpansion, TruncationError, TruncationWarning
from metabayes.measure import (composite_gauss_legendre, ergodic_measure, fisher_from_mean,
                               fisher_info, laplace_moment)

SQRT2 = math.sqrt(2.0)
CUT = SQRT2 - 0.5

# mpmath quadrature of the cutoff density exp(-2 U / sigma^2) (independent script)
S_HAT_01 = 0.827763459227
S_HAT_04 = 0.817619750174
S_HAT_DEGENERATE_01 = 2.82776345923


def _cut(sigma):
    return dyn.cutoff_family(dyn.double_well_family(sigma), CUT)


def test_gauss_legendre_integrates_polynomials_exactly():
    x, w = composite_gauss_legendre(-1.0, 3.0, 256, 64)
    assert w.sum() == pytest.approx(4.0, rel=1e-14)
    assert np.sum(w * x**7) == pytest.approx((3.0**8 - 1.0) / 8, rel=1e-13)


def test_quadratic_gaussian_moments():
    sigma, a = 0.3, 2.5
    m = ergodic_measure(dyn.quadratic_family(sigma, a), [0.0])
    assert m.expect(lambda x: np.ones(len(x))) == pytest.approx(1.0, abs=1e-12)
    assert float(m.moment(2)[0]) == pytest.approx(sigma**2 / (2 * a), abs=1e-8)
    # normalizing constant of exp(-a x^2 / sigma^2)
    assert m.normalization == pytest.approx(math.sqrt(math.pi * sigma**2 / a), rel=1e-10)


def test_exponent_knob():
    sigma, a = 0.3, 2.5
    m = ergodic_measure(dyn.quadratic_family(sigma, a), [0.0], exponent=1.0)
    assert float(m.moment(2)[0]) == pytest.approx(sigma**2 / a, abs=1e-8)


def test_double_well_symmetric_mean():
    for sigma in (0.1, 0.4):
        m = ergodic_measure(dyn.double_well_family(sigma), [0.0])
        assert abs(float(m.mean()[0])) < 1e-10


def test_degenerate_symmetric_score():
    m = ergodic_measure(dyn.degenerate_double_well_family(0.4), [4.0])
    assert abs(float(m.expect(lambda x: -2 * x)[0])) < 1e-10


def test_density_integrates_to_one_and_box_is_wide():
    fam = _cut(0.4)
    m = ergodic_measure(fam, [0.0])
    (a, b), = m.support_box
    x, w = composite_gauss_legendre(a, b, 4096)
    assert np.sum(w * m.density(x[:, None])) == pytest.approx(1.0, abs=1e-6)
    half = 0.25 * (b - a)
    big = ergodic_measure(fam, [0.0], box=[(a - half, b + half)])
    assert abs(big.normalization / m.normalization - 1) < 1e-6


def test_refinement_stability():
    fam = _cut(0.1)
    m1 = ergodic_measure(fam, [0.0])
    m2 = ergodic_measure(fam, [0.0], n_nodes=4096)
    for k in (1, 2, 3):
        assert float(m2.moment(k)[0]) == pytest.approx(float(m1.moment(k)[0]), rel=1e-8)


def test_truncation_warning_and_strict():
    fam = dyn.quadratic_family(1.0)
    with pytest.warns(TruncationWarning):
        ergodic_measure(fam, [0.0], box=[(-1.0, 1.0)])
    with pytest.raises(TruncationError):
        ergodic_measure(fam, [0.0], box=[(-1.0, 1.0)], strict=True)


def test_full_double_well_fisher():
    for sigma in (0.1, 0.4):
        fam = dyn.double_well_family(sigma)
        fi = fisher_info(fam, [0.0], ergodic_measure(fam, [0.0]))
        assert fi.s1 == pytest.approx(2.0, abs=1e-9)
        assert fi.identifiable
        # I^{-1/2} = sigma T2* S~ T1* with M = 2 (V derivative -(2x-2) averages to +2)
        assert abs(fi.info_inverse_sqrt[0, 0]) == pytest.approx(sigma / 2, rel=1e-9)


@pytest.mark.parametrize("sigma,expected", [(0.1, S_HAT_01), (0.4, S_HAT_04)])
def test_cutoff_fisher_matches_quadrature_oracle(sigma, expected):
    fam = _cut(sigma)
    fi = fisher_info(fam, [0.0], ergodic_measure(fam, [0.0]))
    assert fi.s1 == pytest.approx(expected, abs=1e-9)


def test_cutoff_fisher_near_laplace_value():
    fam = _cut(0.1)
    fi = fisher_info(fam, [0.0], ergodic_measure(fam, [0.0]))
    assert fi.s1 == pytest.approx(0.827, abs=0.01)
    assert fi.s1 == pytest.approx(2 * (SQRT2 - 1), abs=5e-3)


def test_degenerate_full_nonidentifiable():
    fam = dyn.degenerate_double_well_family(0.1)
    fi = fisher_info(fam, [4.0], ergodic_measure(fam, [4.0]))
    assert fi.s1 < 1e-8
    assert not fi.identifiable
    assert fi.info_inverse_sqrt is None


def test_degenerate_cutoff_fisher():
    fam = dyn.cutoff_family(dyn.degenerate_double_well_family(0.1), CUT)
    fi = fisher_info(fam, [4.0], ergodic_measure(fam, [4.0]))
    assert fi.s1 == pytest.approx(S_HAT_DEGENERATE_01, abs=1e-9)


def test_degenerate_and_standard_cutoff_measures_agree():
    a = ergodic_measure(_cut(0.4), [0.0])
    b = ergodic_measure(dyn.cutoff_family(dyn.degenerate_double_well_family(0.4), CUT), [4.0])
    xs = np.linspace(-1, 3, 401)[:, None]
    np.testing.assert_allclose(a.density(xs), b.density(xs), rtol=1e-12, atol=1e-12)


def test_two_dimensional_state_quadrature():
    # product of two independent OU factors written as one 2-d family
    sigma = 0.5

    def drift(theta, x):
        return -np.asarray(x) * np.asarray(theta)

    def dparam(theta, x):
        x = np.asarray(x)
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = -x[..., 0]
        out[..., 1, 1] = -x[..., 1]
        return out

    fam = dyn.DriftFamily(2, 2, drift, dparam, lambda th, x: np.zeros(np.shape(x)[:-1] + (2, 2, 2)),
                          sigma, potential=lambda th, x: 0.5 * np.sum(np.asarray(th) * x**2, -1))
    m = ergodic_measure(fam, [1.0, 2.0], box=[(-4, 4), (-4, 4)], n_nodes=128)
    np.testing.assert_allclose(m.expect(lambda x: x**2), [sigma**2 / 2, sigma**2 / 4], rtol=1e-8)


@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_fisher_singular_values_are_eigen_roots(entries):
    mean = np.array(entries).reshape(2, 2)
    fi = fisher_from_mean(mean, 0.7)
    eig = np.sort(np.linalg.eigvalsh(mean.T @ mean))
    np.testing.assert_allclose(fi.singular_values**2, eig, atol=1e-9)
    assert np.all(np.diff(fi.singular_values) >= 0)
    if fi.identifiable and fi.s1 > 1e-3:
        recon = fi.info_inverse_sqrt @ (mean / 0.7)
        np.testing.assert_allclose(recon, np.eye(2), atol=1e-8)


def test_fisher_padding_when_fewer_states():
    fi = fisher_from_mean(np.array([[0.5, -1.0]]), 0.4)
    assert fi.singular_values[0] == 0.0
    assert not fi.identifiable
    assert fi.singular_values[1] == pytest.approx(math.hypot(0.5, 1.0))


@given(st.floats(0.05, 1.0), st.floats(0.5, 4.0))
def test_odd_moments_vanish_for_even_potentials(sigma, a):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TruncationWarning)
        m = ergodic_measure(dyn.quadratic_family(sigma, a), [0.0])
    assert abs(float(m.moment(1)[0])) < 1e-10
    assert abs(float(m.moment(3)[0])) < 1e-10


def test_laplace_identity_on_quadratic():
    fam = dyn.quadratic_family(0.3, 2.0)
    assert laplace_moment(fam, [0.0], 0.0, lambda x: x[..., 0]) == pytest.approx(0.0, abs=1e-12)


def test_laplace_vs_quadrature_on_cutoff():
    fam = _cut(0.1)
    m = ergodic_measure(fam, [0.0])
    lap_mean = laplace_moment(fam, [0.0], SQRT2, lambda x: x[..., 0])
    assert lap_mean == pytest.approx(SQRT2, abs=5e-3)
    assert abs(lap_mean - float(m.mean()[0])) < 5e-3
    lap_s = laplace_moment(fam, [0.0], SQRT2, lambda x: 2 * x[..., 0] - 2)
    assert lap_s == pytest.approx(0.828, abs=5e-3)
    assert abs(lap_s - S_HAT_01) < 5e-3


def test_laplace_rejects_bad_expansion_points():
    fam = dyn.double_well_family(0.1)
    with pytest.raises(InvalidExpansion):
        laplace_moment(fam, [0.0], 0.0, lambda x: x[..., 0])
    with pytest.raises(InvalidExpansion):
        laplace_moment(fam, [0.0], 1.0, lambda x: x[..., 0])
