import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import quad

from qwell import (DegeneracyError, DomainError, InvalidTruncationError, WaveFunction,
                   build_free_basis, diagonalize_sigma, dipole_element, dipole_matrix,
                   eigen_derivatives, frequency_gap_check, hs_sigma_norm, lambda2_coefficient,
                   lambda2_galerkin, lambda2_series, level_shifts)
from qwell.spectral import lambda2_series_tail_bound

PI = math.pi


def mode(k, x):
    return math.sqrt(2) * (math.cos(k * PI * x) if k % 2 else math.sin(k * PI * x))


def quad_dipole(j, k):
    val, _ = quad(lambda x: x * mode(j, x) * mode(k, x), -0.5, 0.5, epsabs=1e-14, limit=200)
    return val


# --- free basis --------------------------------------------------------------

def test_free_eigenvalues_first_three():
    b = build_free_basis(3)
    np.testing.assert_allclose(b.lambdas, [4.934802200544679, 19.739208802178716,
                                           44.41321980490211], rtol=1e-14)


def test_parity_labels():
    assert tuple(build_free_basis(2).parity) == ("even", "odd")


@pytest.mark.parametrize("M", [2, 5, 40])
def test_eigenvalues_strictly_increasing(M):
    assert np.all(np.diff(build_free_basis(M).lambdas) > 0)


@pytest.mark.parametrize("M", [0, 1, 2.5])
def test_truncation_too_small(M):
    with pytest.raises(InvalidTruncationError):
        build_free_basis(M)


def test_mode_values_orthonormal_under_quadrature():
    b = build_free_basis(6)
    x = np.linspace(-0.5, 0.5, 20001)
    vals = b.mode_values(x)
    gram = np.trapezoid(vals[:, None, :] * vals[None, :, :], x, axis=-1)
    np.testing.assert_allclose(gram, np.eye(6), atol=1e-7)


# --- dipole ----------------------------------------------------------------

@pytest.mark.parametrize("j,k", [(1, 1), (1, 3), (2, 4)])
def test_dipole_zero_for_equal_parity(j, k):
    assert dipole_element(j, k) == 0.0


def test_dipole_known_magnitudes():
    assert abs(dipole_element(1, 2)) == pytest.approx(16 / (9 * PI**2), rel=1e-15)
    assert abs(dipole_element(1, 2)) == pytest.approx(0.180127, abs=5e-7)
    assert abs(dipole_element(2, 3)) == pytest.approx(48 / (25 * PI**2), rel=1e-15)
    assert abs(dipole_element(2, 3)) == pytest.approx(0.194537, abs=5e-7)


@pytest.mark.parametrize("j", range(1, 9))
def test_dipole_matches_quadrature(j):
    for k in range(1, 9):
        assert dipole_element(j, k) == pytest.approx(quad_dipole(j, k), abs=1e-12)


def test_dipole_matrix_symmetric_and_consistent():
    X = dipole_matrix(12)
    np.testing.assert_array_equal(X, X.T)
    for j in range(1, 13):
        for k in range(1, 13):
            assert X[j - 1, k - 1] == pytest.approx(dipole_element(j, k), abs=1e-16)


# --- diagonalization ---------------------------------------------------------

def test_zero_field_is_free_basis(basis20):
    sys = diagonalize_sigma(basis20, 0.0)
    np.testing.assert_allclose(sys.mus, basis20.lambdas, rtol=1e-14)
    np.testing.assert_allclose(sys.vectors, np.eye(20), atol=1e-14)


def test_nonfinite_sigma_rejected(basis20):
    with pytest.raises(DomainError):
        diagonalize_sigma(basis20, math.nan)


@given(st.floats(min_value=-60.0, max_value=60.0, allow_nan=False))
def test_eigensystem_properties(sigma):
    b = build_free_basis(20)
    sys = diagonalize_sigma(b, sigma)
    V = sys.vectors
    H = np.diag(b.lambdas) - sigma * b.dipole
    np.testing.assert_allclose(V.T @ V, np.eye(20), atol=1e-12)
    assert np.all(np.diagonal(V) > 0)
    assert np.all(np.diff(sys.mus) > 0)
    np.testing.assert_allclose(H @ V, V * sys.mus, atol=1e-10 * np.max(b.lambdas))


@given(st.floats(min_value=0.0, max_value=60.0, allow_nan=False))
def test_spectrum_even_in_sigma(sigma):
    # x -> -x maps A_sigma onto A_{-sigma}
    b = build_free_basis(20)
    np.testing.assert_allclose(diagonalize_sigma(b, sigma).mus,
                               diagonalize_sigma(b, -sigma).mus, rtol=1e-13)


def test_second_order_shift_of_ground_level(basis200):
    """Ground level at sigma=0.1 against its second-order expansion with the closed-form
    coefficient as stated; this misses because that form lacks a 1/pi^2 factor."""
    mu = diagonalize_sigma(basis200, 0.1).mus[0]
    assert mu == pytest.approx(basis200.lambdas[0] + 0.01 * lambda2_coefficient(1), abs=1e-6)


def test_second_order_shift_of_ground_level_rescaled(basis200):
    mu = diagonalize_sigma(basis200, 0.1).mus[0]
    expected = basis200.lambdas[0] + 0.01 * lambda2_coefficient(1) / PI**2
    assert mu == pytest.approx(expected, abs=1e-6)


def test_shift_magnitude_decreases_with_k(basis200):
    shift = np.abs(level_shifts(diagonalize_sigma(basis200, 0.1), 20))
    assert np.all(np.diff(shift[1:]) < 0)
    assert np.max(np.arange(1, 21) * shift / 0.01) < 0.01


def test_level_shifts_match_eigenvalue_differences(basis20):
    sys = diagonalize_sigma(basis20, 3.0)
    np.testing.assert_allclose(level_shifts(sys), sys.mus - basis20.lambdas, atol=1e-11)


# --- perturbation coefficients -------------------------------------------------

def test_closed_form_values():
    assert lambda2_coefficient(1) == pytest.approx(-0.0216591, abs=1e-7)
    assert lambda2_coefficient(2) == pytest.approx(0.0064588, abs=1e-7)
    assert lambda2_coefficient(3) == pytest.approx(1 / 216 - 5 / (648 * PI**2), abs=1e-16)
    # the quoted value is truncated, not rounded, at seven decimals
    assert lambda2_coefficient(3) == pytest.approx(0.0038477, abs=2e-7)


def test_closed_form_large_k_limit():
    for k in (100, 1000, 10000):
        assert k**2 * lambda2_coefficient(k) == pytest.approx(1 / 24, rel=10 / k**2)


def test_series_single_term():
    assert lambda2_series(1, 2) == pytest.approx(2**7 / PI**4 * 4 / (-3) ** 5, rel=1e-15)


@pytest.mark.parametrize("k", [1, 2, 3, 7])
def test_series_tail_shrinks_beyond_2k(k):
    limit = lambda2_coefficient(k)
    tails = [abs(limit - lambda2_series(k, j)) for j in range(2 * k + 1, 2 * k + 60)]
    assert np.all(np.diff(tails) <= 0)


@pytest.mark.parametrize("k", [1, 2, 5])
def test_series_tail_bound_holds(k):
    exact = lambda2_series(k, 10**6)
    for jmax in (50, 500, 5000):
        assert abs(exact - lambda2_series(k, jmax)) <= lambda2_series_tail_bound(k, jmax)


@pytest.mark.parametrize("k", range(1, 11))
def test_galerkin_coefficient_is_closed_form_over_pi2(basis200, k):
    assert lambda2_galerkin(basis200, k) == pytest.approx(lambda2_coefficient(k) / PI**2,
                                                          abs=1e-12)


def test_perturbation_consistency_closed_form(basis200):
    """Symmetric-averaged (lambda_{k,s} - lambda_k)/s^2 against the closed form."""
    worst = _consistency_excess(basis200, lambda k: lambda2_coefficient(k))
    assert worst <= 0.0, f"excess over budget {worst:.3e}"


def test_perturbation_consistency_rescaled_coefficient(basis200):
    worst = _consistency_excess(basis200, lambda k: lambda2_coefficient(k) / PI**2)
    assert worst <= 0.0, f"excess over budget {worst:.3e}"


def test_perturbation_consistency_insensitive_to_truncation():
    b = build_free_basis(400)
    assert _consistency_excess(b, lambda k: lambda2_coefficient(k) / PI**2) <= 0.0



@given(st.floats(-20, 20))
def test_low_eigenvalues_stable_under_basis_doubling(basis200, sigma):
    small = diagonalize_sigma(build_free_basis(100), sigma).mus[:10]
    large = diagonalize_sigma(basis200, sigma).mus[:10]
    assert np.max(np.abs(small - large)) <= 1e-8

def _consistency_excess(basis, coefficient):
    worst = -math.inf
    for s in (1e-3, 1e-2, 1e-1):
        avg = 0.5 * (level_shifts(diagonalize_sigma(basis, s), 10)
                     + level_shifts(diagonalize_sigma(basis, -s), 10)) / s**2
        for k in range(1, 11):
            ref = coefficient(k)
            worst = max(worst, abs(avg[k - 1] - ref) - (1e-3 * abs(ref) + 1e-6))
    return worst


# --- derivatives ---------------------------------------------------------------

def test_derivatives_vanish_on_diagonal_at_zero_field(basis20):
    der = eigen_derivatives(diagonalize_sigma(basis20, 0.0))
    np.testing.assert_array_equal(der.dlambda, 0.0)


def test_ground_mode_derivative_component(basis20):
    der = eigen_derivatives(diagonalize_sigma(basis20, 0.0))
    gap = basis20.lambdas[1] - basis20.lambdas[0]
    assert gap == pytest.approx(14.8044, abs=1e-4)
    assert abs(der.dvectors[1, 0]) == pytest.approx(0.180127 / 14.8044, abs=1e-6)
    assert abs(der.dvectors[1, 0]) == pytest.approx(0.012167, abs=5e-7)


@pytest.mark.parametrize("sigma", [0.0, 0.7, 20.0])
def test_derivatives_match_finite_differences(basis20, sigma):
    h = 1e-4
    plus, minus = diagonalize_sigma(basis20, sigma + h), diagonalize_sigma(basis20, sigma - h)
    sys = diagonalize_sigma(basis20, sigma)
    der = eigen_derivatives(sys)
    np.testing.assert_allclose(der.dlambda, (plus.mus - minus.mus) / (2 * h), atol=1e-6)
    fd = (plus.vectors - minus.vectors) / (2 * h)
    np.testing.assert_allclose(der.in_free_basis(sys), fd, atol=1e-6)


@pytest.mark.parametrize("sigma", [0.0, 5.0, 20.0])
def test_derivative_orthogonal_to_mode(basis20, sigma):
    sys = diagonalize_sigma(basis20, sigma)
    np.testing.assert_array_equal(np.diagonal(eigen_derivatives(sys).dvectors), 0.0)


def test_hellmann_feynman(basis20):
    sys = diagonalize_sigma(basis20, 4.0)
    V = sys.vectors
    np.testing.assert_allclose(eigen_derivatives(sys).dlambda,
                               -np.einsum("ik,ij,jk->k", V, basis20.dipole, V), atol=1e-14)


def test_derivatives_refuse_degenerate_spectrum(basis20):
    import dataclasses
    sys = diagonalize_sigma(basis20, 0.0)
    mus = sys.mus.copy()
    mus[3] = mus[2]
    with pytest.raises(DegeneracyError) as err:
        eigen_derivatives(dataclasses.replace(sys, mus=mus))
    assert err.value.pair == (3, 4)


def test_ground_mode_derivative_norm(basis20):
    der = eigen_derivatives(diagonalize_sigma(basis20, 0.0))
    lam1 = PI**2 / 2
    oracle = math.sqrt(math.fsum((dipole_element(1, j) / (j * j * PI**2 / 2 - lam1)) ** 2
                                 for j in range(2, 20001)))
    assert np.linalg.norm(der.dvectors[:, 0]) == pytest.approx(oracle, rel=1e-9)
    assert oracle == pytest.approx(0.012169, abs=1e-6)


# --- frequency gaps -------------------------------------------------------------

def test_gap_positive_for_three_modes(basis20):
    rep = frequency_gap_check(build_free_basis(200), 0.0, 3, 200)
    assert rep.delta > 0 and not rep.degenerate and rep.collisions == ()


def test_gap_single_first_index(basis20):
    rep = frequency_gap_check(basis20, 0.3, 1, 20)
    mus = diagonalize_sigma(basis20, 0.3).mus
    diffs = np.sort(mus[0] - mus[1:])
    assert rep.delta == pytest.approx(np.min(np.diff(diffs)), rel=1e-12)


def test_gap_detects_integer_collision(basis20):
    rep = frequency_gap_check(basis20, 0.0, 5, 14)
    assert rep.degenerate and rep.delta == pytest.approx(0.0, abs=1e-10)
    found = {frozenset(c) for c in rep.collisions}
    assert frozenset({(1, 5), (5, 7)}) in found
    # the colliding difference is 24 pi^2 / 2 in absolute value
    assert abs(basis20.lambdas[0] - basis20.lambdas[4]) == pytest.approx(12 * PI**2)


def test_gap_small_field_three_modes(basis20):
    assert frequency_gap_check(basis20, 0.05, 3, 5).delta > 1.0


# --- Sobolev-type norm --------------------------------------------------------

def test_hs_norm_order_zero_is_l2(sys20):
    psi = WaveFunction.from_modes(20, {1: 1.0, 2: 0.5j, 7: -0.3}, sys=sys20)
    assert hs_sigma_norm(psi, sys20, 0.0) == pytest.approx(1.0, abs=1e-14)


@pytest.mark.parametrize("s", [0.5, 1.0, 3.0])
def test_hs_norm_single_mode(sys20, s):
    psi = WaveFunction.from_modes(20, {1: 1.0}, sys=sys20)
    assert hs_sigma_norm(psi, sys20, s) == pytest.approx(sys20.mus[0] ** (s / 2), rel=1e-12)


def test_hs_norm_two_modes(basis20):
    sys = diagonalize_sigma(basis20, 0.0)
    psi = WaveFunction.from_modes(20, {1: 1.0, 3: 1.0})
    l1, l3 = PI**2 / 2, 9 * PI**2 / 2
    assert hs_sigma_norm(psi, sys, 2.0) == pytest.approx(math.sqrt((l1**2 + l3**2) / 2),
                                                         rel=1e-13)
    assert hs_sigma_norm(psi, sys, 2.0) == pytest.approx(31.598, abs=5e-4)


def test_hs_norm_requires_positive_operator(basis20):
    sys = diagonalize_sigma(basis20, 200.0)
    assert sys.mus[0] < 0
    with pytest.raises(DomainError):
        hs_sigma_norm(WaveFunction.from_modes(20, {1: 1.0}), sys, 1.0)
