import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import expm

from qwell import (ContractionError, FeedbackConfig, FixedSigma, ImplicitSigma, ThetaSpec,
                   TruncationTooSmallError, WaveFunction, build_free_basis, calibrate_cstar,
                   choose_cutoff, diagonalize_sigma, eigen_derivatives, feedback_v,
                   implicit_sigma, lyapunov, lyapunov_rate, mu_factor, split_step,
                   theory_safe_theta, validate_initial_condition)
from qwell.config import CALIBRATION_SIGMAS
from qwell.feedback import (contraction_ratio, lyapunov_sigma_derivative, theta_eval,
                            theta_prime)
from qwell.verification import scan_fixed_point

EPS = 0.05
GAIN = 1e3


def explicit(sigma=20.0, N=3):
    return FeedbackConfig(N, EPS, GAIN, FixedSigma(sigma))


def implicit(spec):
    return FeedbackConfig(3, EPS, GAIN, ImplicitSigma(spec))


@pytest.fixture(scope="module")
def safe_theta(basis20):
    consts = calibrate_cstar(basis20, CALIBRATION_SIGMAS, kmax=20, N=3)
    return theory_safe_theta(700.0, 3, EPS, 1 / math.sqrt(2), consts)


def generic_state(M=20, modes=6, seed_phase=0.37):
    k = np.arange(1, modes + 1)
    amps = np.exp(1j * seed_phase * k**2) / k
    c = np.zeros(M, dtype=complex)
    c[:modes] = amps
    return WaveFunction(c / np.linalg.norm(c))


complex_vectors = st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1)), min_size=20,
                           max_size=20).map(lambda xs: np.array([complex(*x) for x in xs]))\
    .filter(lambda c: np.linalg.norm(c) > 1e-3).map(lambda c: c / np.linalg.norm(c))


# --- wave functions ---------------------------------------------------------

def test_wavefunction_requires_unit_norm():
    with pytest.raises(ValueError):
        WaveFunction(np.array([1.0, 1.0]))


def test_wavefunction_is_immutable():
    psi = WaveFunction(np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        psi.coeffs[0] = 0.0


def test_from_modes_in_perturbed_basis(sys20):
    psi = WaveFunction.from_modes(20, {2: 1.0}, sys=sys20)
    np.testing.assert_allclose(psi.coeffs, sys20.vectors[:, 1], atol=1e-15)


def test_from_modes_rejects_bad_index():
    with pytest.raises(ValueError):
        WaveFunction.from_modes(5, {6: 1.0})


# --- Lyapunov function --------------------------------------------------------

def test_lyapunov_ground_state(sys20):
    assert lyapunov(WaveFunction.from_modes(20, {1: 1.0}, sys=sys20), sys20, 3, EPS) \
        == pytest.approx(0.0, abs=1e-15)


def test_lyapunov_second_mode(sys20):
    assert lyapunov(WaveFunction.from_modes(20, {2: 1.0}, sys=sys20), sys20, 3, EPS) \
        == pytest.approx(EPS, abs=1e-15)


def test_lyapunov_superposition(sys20):
    psi = WaveFunction.from_modes(20, {1: 1.0, 3: 1.0}, sys=sys20)
    assert lyapunov(psi, sys20, 3, EPS) == pytest.approx(1 - 0.5 - 0.95 * 0.5, abs=1e-15)


def test_lyapunov_cutoff_above_truncation(sys20):
    with pytest.raises(ValueError):
        lyapunov(generic_state(), sys20, 21, EPS)


@given(complex_vectors, st.floats(0, 2 * math.pi))
def test_lyapunov_and_feedback_gauge_invariant(c, alpha):
    sys = diagonalize_sigma(build_free_basis(20), 20.0)
    psi = WaveFunction(c)
    rotated = psi.with_phase(alpha)
    assert lyapunov(rotated, sys, 3, EPS) == pytest.approx(lyapunov(psi, sys, 3, EPS),
                                                           abs=1e-13)
    v0 = feedback_v(psi, sys, explicit())
    assert feedback_v(rotated, sys, explicit()) == pytest.approx(v0, abs=1e-10 * (1 + abs(v0)))


@given(complex_vectors, st.integers(1, 20), st.floats(0.01, 0.99))
def test_lyapunov_bounds(c, N, eps):
    sys = diagonalize_sigma(build_free_basis(20), 5.0)
    d = sys.project(c)
    miss = 1.0 - abs(d[0]) ** 2
    value = lyapunov(c, sys, N, eps)
    assert eps * miss - 1e-13 <= value <= miss + 1e-13


# --- feedback law ----------------------------------------------------------------

@pytest.mark.parametrize("alpha", [0.0, 1.1, 4.0])
def test_feedback_vanishes_on_eigenstate(sys20, alpha):
    psi = WaveFunction.from_modes(20, {1: np.exp(1j * alpha)}, sys=sys20)
    assert feedback_v(psi, sys20, explicit()) == pytest.approx(0.0, abs=1e-12)


def test_feedback_vanishes_on_real_coordinates(sys20):
    psi = WaveFunction.from_modes(20, {1: 0.3, 2: -0.7, 3: 0.2, 5: 0.6}, sys=sys20)
    assert feedback_v(psi, sys20, explicit()) == pytest.approx(0.0, abs=1e-12)


def test_feedback_sign_gives_decrease(sys20):
    psi = generic_state()
    v = feedback_v(psi, sys20, explicit())
    assert v != 0.0
    for dv in (0.5 * v, v, 2 * v):
        rate = lyapunov_rate(psi, sys20, 3, EPS, dv)
        assert rate < 0.0


def test_rate_identity(sys20):
    psi = generic_state()
    v = feedback_v(psi, sys20, explicit())
    assert lyapunov_rate(psi, sys20, 3, EPS, v) == pytest.approx(-2 * v**2 / GAIN, rel=1e-12)


@pytest.mark.parametrize("v", [0.0, 3.0, -40.0])
def test_rate_matches_exact_propagator(basis20, sys20, v):
    psi = generic_state()
    H = np.diag(basis20.lambdas) - (20.0 + v) * basis20.dipole
    h = 1e-6
    plus = expm(-1j * h * H) @ psi.coeffs
    minus = expm(1j * h * H) @ psi.coeffs
    fd = (lyapunov(plus, sys20, 3, EPS) - lyapunov(minus, sys20, 3, EPS)) / (2 * h)
    assert lyapunov_rate(psi, sys20, 3, EPS, v) == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_one_step_decrease_matches_rate(sys20):
    psi = generic_state()
    dt = 1e-5
    v = feedback_v(psi, sys20, explicit())
    change = lyapunov(split_step(psi, sys20, v, dt), sys20, 3, EPS) - lyapunov(psi, sys20, 3, EPS)
    assert change == pytest.approx(-2 * v**2 / GAIN * dt, rel=1e-3)


def test_sigma_derivative_matches_finite_difference(basis20):
    psi = generic_state()
    s, h = 2.0, 1e-5
    fd = (lyapunov(psi, diagonalize_sigma(basis20, s + h), 3, EPS)
          - lyapunov(psi, diagonalize_sigma(basis20, s - h), 3, EPS)) / (2 * h)
    exact = lyapunov_sigma_derivative(psi, diagonalize_sigma(basis20, s), 3, EPS)
    assert exact == pytest.approx(fd, rel=1e-6)


# --- shaping -------------------------------------------------------------------

def test_theta_at_zero():
    assert theta_eval(ThetaSpec(700.0), 0.0) == 0.0


def test_theta_linear():
    assert theta_eval(ThetaSpec(700.0), 0.01) == pytest.approx(7.0, rel=1e-15)


def test_theta_saturates():
    spec = ThetaSpec(700.0, theta_max=2.0)
    assert theta_eval(spec, 0.5) == 2.0
    assert theta_prime(spec, 0.5) == 0.0
    assert theta_prime(spec, 0.001) == 700.0


def test_theta_rejects_negative_parameters():
    with pytest.raises(ValueError):
        ThetaSpec(-1.0)


# --- implicit field strength ------------------------------------------------------

def test_zero_slope_gives_zero_field(basis20):
    res = implicit_sigma(generic_state(), basis20, implicit(ThetaSpec(0.0)))
    assert res.sigma == 0.0 and res.iterations == 1


def test_implicit_requires_implicit_mode(basis20):
    with pytest.raises(ValueError):
        implicit_sigma(generic_state(), basis20, explicit())


def test_ground_state_fixed_point_theory_safe(basis20, safe_theta):
    psi = WaveFunction.from_modes(20, {1: 1.0})
    cfg = implicit(safe_theta)
    res = implicit_sigma(psi, basis20, cfg)
    assert res.residual <= 1e-12
    roots = scan_fixed_point(psi, basis20, cfg)
    assert len(roots) == 1 and res.sigma == pytest.approx(roots[0], abs=1e-11)


@pytest.mark.parametrize("method", ["newton", "picard"])
def test_theory_safe_fixed_point_agrees_with_scan(basis20, safe_theta, method):
    psi = generic_state()
    cfg = implicit(safe_theta)
    res = implicit_sigma(psi, basis20, cfg, method=method)
    assert res.residual <= 1e-12
    roots = scan_fixed_point(psi, basis20, cfg)
    assert len(roots) == 1
    assert res.sigma == pytest.approx(roots[0], abs=1e-11)


def test_steep_fixed_point_agrees_with_scan(basis20):
    psi = WaveFunction.from_modes(20, {1: 1.0, 3: 1.0})
    cfg = implicit(ThetaSpec(700.0))
    res = implicit_sigma(psi, basis20, cfg)
    assert res.residual <= 1e-12 and res.iterations <= 100
    roots = scan_fixed_point(psi, basis20, cfg)
    assert len(roots) == 1
    assert res.sigma == pytest.approx(roots[0], abs=1e-11)


def test_contraction_failure_reports_history(basis20):
    psi = WaveFunction.from_modes(20, {1: 1.0, 3: 1.0})
    with pytest.raises(ContractionError) as err:
        implicit_sigma(psi, basis20, implicit(ThetaSpec(700.0)), max_iter=2)
    assert len(err.value.last_iterates) == 2
    assert err.value.ratio > 0


def test_warm_start_reproduces_cold_start(basis20):
    psi = WaveFunction.from_modes(20, {1: 1.0, 3: 1.0})
    cfg = implicit(ThetaSpec(700.0))
    cold = implicit_sigma(psi, basis20, cfg)
    warm = implicit_sigma(psi, basis20, cfg, warm=cold.system)
    assert warm.iterations == 1
    assert warm.sigma == cold.sigma


def test_theory_safe_map_contracts(basis20, safe_theta):
    assert contraction_ratio(generic_state(), basis20, implicit(safe_theta), 0.0, 0.2) < 1.0


# --- rate factor ---------------------------------------------------------------------

def test_mu_is_one_for_flat_theta(sys20):
    psi = generic_state()
    assert mu_factor(psi, sys20, eigen_derivatives(sys20), ThetaSpec(0.0), 3, EPS) == 1.0


def test_mu_bounded_in_theory_safe_mode(basis20, safe_theta):
    for phase in (0.1, 0.37, 1.3, 2.9):
        psi = generic_state(seed_phase=phase)
        res = implicit_sigma(psi, basis20, implicit(safe_theta))
        mu = mu_factor(psi, res.system, eigen_derivatives(res.system), safe_theta, 3, EPS)
        assert 0.5 < mu < 2.0


def test_mu_consistent_with_solver_slope(basis20):
    psi = WaveFunction.from_modes(20, {1: 1.0, 3: 1.0})
    spec = ThetaSpec(700.0)
    res = implicit_sigma(psi, basis20, implicit(spec))
    mu = mu_factor(psi, res.system, eigen_derivatives(res.system), spec, 3, EPS)
    assert mu == pytest.approx(res.mu, rel=1e-10)


# --- constants and hypotheses ---------------------------------------------------------

def test_cutoff_example():
    assert choose_cutoff(1.0, 2.0, 0.05, 1 / math.sqrt(2), 0.0, 0.0) == 1


def test_cutoff_large_epsilon():
    assert choose_cutoff(1.0, 2.0, 1 - 1e-12, 0.5, 0.0, 0.0) == 1


def test_cutoff_impossible():
    with pytest.raises(TruncationTooSmallError):
        choose_cutoff(1.0, 1e-6, 0.05, 1e-3, 0.0, 0.0)


def test_initial_condition_accepted(sys20):
    psi = WaveFunction.from_modes(20, {1: 1.0, 3: 1.0}, sys=sys20)
    rep = validate_initial_condition(psi, sys20, explicit(), 0.5)
    assert rep.passed and rep.tail_mass == pytest.approx(0.0, abs=1e-28)
    assert rep.overlap == pytest.approx(1 / math.sqrt(2), rel=1e-14)


def test_initial_condition_rejected(sys20):
    psi = WaveFunction.from_modes(20, {4: 1.0}, sys=sys20)
    rep = validate_initial_condition(psi, sys20, explicit(), 0.5)
    assert not rep.tail_ok and not rep.overlap_ok


def test_initial_condition_threshold(sys20):
    psi = WaveFunction.from_modes(20, {1: 1.0}, sys=sys20)
    rep = validate_initial_condition(psi, sys20, explicit(), 1 / math.sqrt(2))
    assert rep.tail_threshold == pytest.approx(EPS * 0.5 / (1 - EPS), rel=1e-14)
    assert rep.tail_threshold == pytest.approx(0.0263, abs=1e-4)


def test_calibration_at_zero_matches_finite_differences(basis20):
    with pytest.warns(UserWarning, match="gap check"):
        consts = calibrate_cstar(basis20, [0.0], kmax=20, N=3)
    h = 1e-5
    fd = (diagonalize_sigma(basis20, h).vectors - diagonalize_sigma(basis20, -h).vectors) / (2 * h)
    k = np.arange(1, 21)
    assert consts.cstar == pytest.approx(np.max(k * np.linalg.norm(fd, axis=0)), abs=1e-4)


def test_theory_safe_caps(safe_theta, basis20):
    consts = calibrate_cstar(basis20, CALIBRATION_SIGMAS, kmax=20, N=3)
    C = consts.cstar
    assert safe_theta.slope < 1 / (3 * (1 + 3 * C))
    assert safe_theta.slope <= 1 / (36 * 3 * C)
    assert safe_theta.theta_max <= 1 / math.sqrt(2) / (2 * C)
