"""Lyapunov functionals and feedback laws.

Notation: ``d_k = <psi, phi_{k,sigma}>`` are the coordinates of the state in
the perturbed eigenbasis and ``a = (1, 1-eps, ..., 1-eps)`` (length ``N``)
are the Lyapunov weights.  With ``S = Im sum_k a_k <x psi, phi_k> conj(d_k)``

    V(psi) = 1 - sum_k a_k |d_k|^2,
    v(psi) = -gain * S,

and under ``u = sigma + v`` one has ``dV/dt = 2 v S = -2 v^2 / gain``.

For the implicit design the field strength itself solves
``sigma = theta(V_sigma(psi))``; see :func:`implicit_sigma`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Union

import numpy as np

from . import _kernels
from .errors import (ContractionError, DegeneracyError, EigenSolverError,
                     ModeViolationError, TruncationTooSmallError)
from .spectral import (FreeBasis, SigmaEigenSystem, _eigh_sigma, _frozen, diagonalize_sigma,
                       eigen_derivatives, frequency_gap_check)

NORM_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class WaveFunction:
    """State as free-basis coefficients; unit norm is enforced on construction."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=complex)
        if c.ndim != 1:
            raise ValueError("coefficients must be a 1-D vector")
        norm = np.linalg.norm(c)
        if abs(norm - 1.0) > NORM_TOL:
            raise ValueError(f"state must have unit norm (got {norm:.12g})")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def M(self) -> int:
        return self.coeffs.size

    @classmethod
    def from_modes(cls, M: int, modes, sys: SigmaEigenSystem | None = None,
                   normalize: bool = True) -> "WaveFunction":
        """Build from ``{k: amplitude}`` (or pairs); ``sys`` selects the
        ``phi_{k,sigma}`` basis instead of the free one."""
        amps = np.zeros(M, dtype=complex)
        items = modes.items() if hasattr(modes, "items") else modes
        for k, z in items:
            if not 1 <= k <= M:
                raise ValueError(f"mode {k} outside 1..{M}")
            amps[k - 1] += z
        if sys is not None and sys.M != M:
            raise ValueError(f"basis has M={sys.M}, expected {M}")
        c = amps if sys is None else sys.vectors @ amps
        if normalize:
            n = np.linalg.norm(c)
            if n == 0:
                raise ValueError("initial state has zero norm")
            c = c / n
        return cls(c)

    def with_phase(self, alpha: float) -> "WaveFunction":
        return WaveFunction(np.exp(1j * alpha) * self.coeffs)


def _coeffs(psi) -> np.ndarray:
    return psi.coeffs if isinstance(psi, WaveFunction) else np.asarray(psi, dtype=complex)


@dataclass(frozen=True)
class ThetaSpec:
    """Shaping ``theta(r) = min(min(eta, slope_max) * r, theta_max)`` for ``r >= 0``."""

    eta: float
    theta_max: float = math.inf
    slope_max: float = math.inf
    mode: str = "paper_sim"

    def __post_init__(self):
        if self.eta < 0 or self.theta_max < 0 or self.slope_max < 0:
            raise ValueError("theta parameters must be nonnegative")
        if self.mode not in ("paper_sim", "theory_safe"):
            raise ValueError(f"unknown theta mode {self.mode!r}")

    @property
    def slope(self) -> float:
        return min(self.eta, self.slope_max)

    @property
    def sup(self) -> float:
        """Upper end of the range of theta on ``[0, 1]`` (the values V can take)."""
        return min(self.slope, self.theta_max)


def theta_eval(spec: ThetaSpec, r: float) -> float:
    if r <= 0.0:
        return 0.0
    return min(spec.slope * r, spec.theta_max)


def theta_prime(spec: ThetaSpec, r: float) -> float:
    # one-sided (left) derivative at the saturation kink
    if r < 0.0:
        return 0.0
    return spec.slope if spec.slope * r <= spec.theta_max else 0.0


@dataclass(frozen=True)
class FixedSigma:
    sigma: float


@dataclass(frozen=True)
class ImplicitSigma:
    theta: ThetaSpec


@dataclass(frozen=True)
class FeedbackConfig:
    N: int
    epsilon: float
    gain: float
    sigma_mode: Union[FixedSigma, ImplicitSigma] = FixedSigma(0.0)

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"cutoff N must be a positive integer, got {self.N!r}")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if not self.gain > 0.0:
            raise ValueError(f"gain must be positive, got {self.gain}")

    @property
    def implicit(self) -> bool:
        return isinstance(self.sigma_mode, ImplicitSigma)

    @property
    def weights(self) -> np.ndarray:
        return lyapunov_weights(self.N, self.epsilon)


def lyapunov_weights(N: int, epsilon: float) -> np.ndarray:
    a = np.full(N, 1.0 - epsilon)
    a[0] = 1.0
    return a


def _lyap_from_proj(d, a) -> float:
    n = a.size
    return 1.0 - float(np.dot(a, d[:n].real ** 2 + d[:n].imag ** 2))


def _feedback_sum(d, Xs, a) -> float:
    """``Im sum_k a_k <x psi, phi_k> conj(d_k)`` from sigma-basis coordinates."""
    n = a.size
    xd = Xs[:n] @ d
    return float(np.dot(a, (xd * np.conj(d[:n])).imag))


def lyapunov(psi, sys: SigmaEigenSystem, N: int, epsilon: float) -> float:
    if N > sys.M:
        raise ValueError(f"cutoff N={N} exceeds truncation M={sys.M}")
    return _lyap_from_proj(sys.project(_coeffs(psi)), lyapunov_weights(N, epsilon))


def feedback_v(psi, sys: SigmaEigenSystem, cfg: FeedbackConfig) -> float:
    d = sys.project(_coeffs(psi))
    return -cfg.gain * _feedback_sum(d, sys.dipole_sigma, cfg.weights)


def lyapunov_rate(psi, sys: SigmaEigenSystem, N: int, epsilon: float, v: float) -> float:
    """Time derivative of V along ``i psi' = (A_sigma - v x) psi``, from the
    matrices: ``-2 Re sum_k a_k <-i A_sigma psi + i v x psi, phi_k> conj(d_k)``."""
    a = lyapunov_weights(N, epsilon)
    d = sys.project(_coeffs(psi))
    xd = sys.dipole_sigma[:N] @ d
    inner = -1j * sys.mus[:N] * d[:N] + 1j * v * xd
    return float(-2.0 * np.dot(a, (inner * np.conj(d[:N])).real))


def _dlyap_dsigma(d, mus, Xs, a) -> float:
    """``dV/dsigma = -2 Re sum_k a_k conj(d_k) <psi, dphi_k/dsigma>``."""
    n = a.size
    gaps = mus[:, None] - mus[None, :n]
    idx = np.arange(n)
    gaps[idx, idx] = 1.0
    C = Xs[:, :n] / gaps
    C[idx, idx] = 0.0
    return float(-2.0 * np.dot(a, (np.conj(d[:n]) * (C.T @ d)).real))


def lyapunov_sigma_derivative(psi, sys: SigmaEigenSystem, N: int, epsilon: float) -> float:
    gaps = np.diff(sys.mus)
    if np.min(gaps) < 1e-10:
        i = int(np.argmin(gaps))
        raise DegeneracyError(f"modes {i + 1} and {i + 2} collide", pair=(i + 1, i + 2),
                              gap=float(gaps[i]))
    return _dlyap_dsigma(sys.project(_coeffs(psi)), sys.mus, sys.dipole_sigma,
                         lyapunov_weights(N, epsilon))


def mu_factor(psi, sys: SigmaEigenSystem, derivs, spec: ThetaSpec, N: int,
              epsilon: float) -> float:
    """Rate factor ``mu`` with ``1/mu = 1 + 2 theta'(V) Re sum a_k d_k <dphi_k, psi>``."""
    c = _coeffs(psi)
    a = lyapunov_weights(N, epsilon)
    d = sys.project(c)
    V = _lyap_from_proj(d, a)
    dphi = derivs.dvectors[:, :N].T @ d  # <psi, dphi_k>
    R = float(np.dot(a, (d[:N] * np.conj(dphi)).real))
    inv = 1.0 + 2.0 * theta_prime(spec, V) * R
    if inv <= 0.0:
        raise ModeViolationError(f"1/mu = {inv:.3e} <= 0: theta slope too large for this state")
    return 1.0 / inv


# --- implicit field strength ---------------------------------------------

class ImplicitSigmaResult(NamedTuple):
    sigma: float
    iterations: int
    residual: float
    system: SigmaEigenSystem
    ratio: float
    slope: float

    @property
    def mu(self) -> float:
        """``1 / (1 - Pi'(sigma))``: the rate factor at the fixed point."""
        return 1.0 / (1.0 - self.slope)


def implicit_sigma(psi, basis: FreeBasis, cfg: FeedbackConfig, tol: float = 1e-12,
                   max_iter: int = 100, sigma0: float = 0.0,
                   warm: SigmaEigenSystem | None = None,
                   method: str = "newton") -> ImplicitSigmaResult:
    """Solve ``sigma = theta(V_{sigma,N,eps}(psi))``.

    ``method="picard"`` iterates ``sigma <- theta(V_sigma(psi))``.  The default
    ``"newton"`` uses the same map but relaxes each update by
    ``1 / (1 - Pi'(sigma))`` with ``Pi'`` from the eigenvector sensitivities;
    a relaxed step that does not shrink the residual falls back to a plain
    one.  ``warm`` is an eigensystem to reuse for the first evaluation (its
    sigma replaces ``sigma0``).  Each evaluation counts as one iteration.
    """
    if not cfg.implicit:
        raise ValueError("implicit_sigma needs a FeedbackConfig in implicit mode")
    if method not in ("newton", "picard"):
        raise ValueError(f"unknown method {method!r}")
    spec = cfg.sigma_mode.theta
    c = _coeffs(psi)
    a = cfg.weights
    # V <= 1 for every psi, so theta(V) never leaves [0, spec.sup]
    hi = spec.sup
    if warm is not None:
        s, mus, V = warm.sigma, warm.mus, warm.vectors
    else:
        s = min(max(float(sigma0), 0.0), hi)
        mus, V = _eigh_sigma(basis, s)
    try:
        s, mus, V, Xs, it, res, slope, ok, hist = _kernels.fixed_point(
            np.ascontiguousarray(c.real), np.ascontiguousarray(c.imag), float(s),
            np.ascontiguousarray(mus), np.ascontiguousarray(V), _contig(basis.lambdas),
            _contig(basis.dipole), a, float(spec.slope), float(spec.theta_max), float(hi),
            float(tol), int(max_iter), method == "newton")
    except (np.linalg.LinAlgError, ValueError, ZeroDivisionError) as exc:
        raise EigenSolverError(f"eigensolver failed during fixed-point iteration: {exc}",
                               condition=math.inf) from exc
    history = [(hist[0], hist[1]), (hist[2], hist[3])] if it > 1 else [(hist[2], hist[3])]
    if not ok:
        raise ContractionError(
            f"fixed point not reached in {max_iter} iterations (last residual {res:.3e})",
            last_iterates=history, ratio=_ratio(history))
    sys = SigmaEigenSystem(s, basis, _frozen(mus), _frozen(V))
    sys.__dict__["dipole_sigma"] = _frozen(Xs)  # prime the cached property
    return ImplicitSigmaResult(s, it, res, sys, _ratio(history), slope)


def _contig(arr):
    return arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)


def _ratio(history) -> float:
    if len(history) < 2:
        return math.nan
    (s0, p0), (s1, p1) = history[-2], history[-1]
    if s1 == s0:
        return math.nan
    return abs(p1 - p0) / abs(s1 - s0)


def contraction_ratio(psi, basis: FreeBasis, cfg: FeedbackConfig, s1: float, s2: float) -> float:
    """Empirical ``|Pi(s1) - Pi(s2)| / |s1 - s2|`` of the fixed-point map."""
    spec = cfg.sigma_mode.theta
    N, eps = cfg.N, cfg.epsilon
    p1 = theta_eval(spec, lyapunov(psi, diagonalize_sigma(basis, s1), N, eps))
    p2 = theta_eval(spec, lyapunov(psi, diagonalize_sigma(basis, s2), N, eps))
    return abs(p1 - p2) / abs(s1 - s2)


# --- constants, cutoffs, hypotheses --------------------------------------

@dataclass(frozen=True)
class CalibratedConstants:
    """Sampled surrogates: ``cstar`` is a sampled supremum, hence only a lower
    bound on any constant that works for all sigma and k."""

    cstar: float
    sigma_gap_max: float
    sampled: bool = True


def calibrate_cstar(basis: FreeBasis, sigma_samples, kmax: int, N: int = 3,
                    gap_threshold: float = 1e-6) -> CalibratedConstants:
    """Sample ``k ||dphi_k/dsigma||``, ``k ||phi_{k,s0} - phi_{k,s1}|| / |s0 - s1|``
    and ``k |lambda_{k,sigma} - lambda_k| / sigma^2`` over ``k <= kmax``."""
    samples = sorted({float(s) for s in sigma_samples})
    if not samples:
        raise ValueError("sigma_samples must be nonempty")
    if kmax > basis.M:
        raise ValueError(f"kmax={kmax} exceeds M={basis.M}")
    k = np.arange(1, kmax + 1)
    best = 0.0
    systems = []
    for s in samples:
        sys = diagonalize_sigma(basis, s)
        try:
            der = eigen_derivatives(sys)
        except DegeneracyError as exc:
            warnings.warn(f"sigma={s} excluded from calibration: {exc}")
            continue
        norms = np.linalg.norm(der.dvectors[:, :kmax], axis=0)
        best = max(best, float(np.max(k * norms)))
        if s != 0.0:
            shift = np.abs(sys.mus[:kmax] - basis.lambdas[:kmax])
            best = max(best, float(np.max(k * shift / s**2)))
        systems.append(sys)
    for s0, s1 in zip(systems, systems[1:]):
        diff = np.linalg.norm(s0.vectors[:, :kmax] - s1.vectors[:, :kmax], axis=0)
        best = max(best, float(np.max(k * diff / abs(s0.sigma - s1.sigma))))

    k2max = min(basis.M, max(N + 1, (N * N + 1) // 2 + 1))
    gap_max = 0.0
    for s in sorted((s for s in samples if s != 0.0), key=abs):
        if frequency_gap_check(basis, s, N, k2max).delta > gap_threshold:
            gap_max = abs(s)
        else:
            break
    if gap_max == 0.0:
        warnings.warn("no nonzero sample passed the frequency gap check")
    return CalibratedConstants(best, gap_max)


def theory_safe_theta(eta: float, N: int, epsilon: float, gamma: float,
                      consts: CalibratedConstants) -> ThetaSpec:
    """Theta with the slope and amplitude caps required by the convergence
    argument, evaluated with the sampled constants."""
    C = consts.cstar
    slope_max = min(1.0 / (36.0 * N * C), 1.0 / (3.0 * (1.0 + N * C)))
    # strict slope inequality: stay just below the second cap
    slope_max = math.nextafter(slope_max, 0.0)
    theta_max = min(
        math.sqrt(epsilon * gamma**2 * N / (32.0 * (1.0 - epsilon / 2.0))) / C,
        gamma / (2.0 * C),
        consts.sigma_gap_max,
        (math.sqrt(1.0 - epsilon / 2.0) - math.sqrt(1.0 - epsilon)) / C,
    )
    return ThetaSpec(eta=eta, theta_max=theta_max, slope_max=slope_max, mode="theory_safe")


def choose_cutoff(Gamma: float, s: float, epsilon: float, gamma: float, cstar: float,
                  sigma_star: float, M: int = 20) -> int:
    """Smallest ``N`` with ``Gamma^2 / (lambda_{N+1} - C sigma*^2/(N+1))^s <= eps gamma^2/(1-eps)``."""
    if not (Gamma > 0 and s > 0 and 0 < epsilon < 1 and 0 < gamma < 1):
        raise ValueError("need Gamma > 0, s > 0, 0 < epsilon < 1, 0 < gamma < 1")
    rhs = epsilon * gamma**2 / (1.0 - epsilon)
    for N in range(1, M):
        lam_next = (N + 1) ** 2 * math.pi**2 / 2.0
        den = lam_next - cstar * sigma_star**2 / (N + 1)
        if den <= 0:
            continue
        if Gamma**2 / den**s <= rhs:
            return N
    raise TruncationTooSmallError(f"no cutoff N < M={M} satisfies the tail inequality")


class InitialConditionReport(NamedTuple):
    variant: str
    tail_mass: float
    tail_threshold: float
    overlap: float
    gamma: float
    tail_ok: bool
    overlap_ok: bool
    truncated_at: int

    @property
    def passed(self) -> bool:
        return self.tail_ok and self.overlap_ok


def validate_initial_condition(psi, sys: SigmaEigenSystem, cfg: FeedbackConfig, gamma: float,
                               variant: str = "explicit") -> InitialConditionReport:
    """Check the tail-mass and first-mode hypotheses; tails are truncated at ``M``.

    For the implicit variant pass the unperturbed system (sigma = 0).
    """
    eps, N = cfg.epsilon, cfg.N
    if variant == "explicit":
        thr = eps * gamma**2 / (1.0 - eps)
    elif variant == "implicit":
        thr = eps * gamma**2 / (32.0 * (1.0 - eps / 2.0))
    else:
        raise ValueError(f"unknown variant {variant!r}")
    d = sys.project(_coeffs(psi))
    tail = float(np.sum(np.abs(d[N:]) ** 2))
    overlap = float(abs(d[0]))
    return InitialConditionReport(variant, tail, thr, overlap, gamma,
                                  tail < thr, overlap >= gamma, sys.M)
