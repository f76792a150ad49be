"""Spectral data of the Stark-shifted infinite square well.

The free Hamiltonian ``A = -1/2 d^2/dx^2`` on ``I = (-1/2, 1/2)`` with
Dirichlet ends has eigenpairs ``lambda_k = k^2 pi^2 / 2`` and

    phi_k(x) = sqrt(2) cos(k pi x)   (k odd),
    phi_k(x) = sqrt(2) sin(k pi x)   (k even).

Everything here works on coefficient vectors in that basis, truncated to the
first ``M`` modes.  The perturbed operator ``A_sigma = A - sigma x`` becomes
the dense symmetric matrix ``diag(lambda) - sigma X`` with ``X_jk = <x phi_j,
phi_k>``, and its eigenpairs are obtained by direct diagonalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .errors import DegeneracyError, DomainError, EigenSolverError, InvalidTruncationError

ORTHO_TOL = 1e-12
DEGENERACY_TOL = 1e-10


def _frozen(a):
    a = np.asarray(a)
    a.setflags(write=False)
    return a


def dipole_element(j: int, k: int) -> float:
    """Return ``<x phi_j, phi_k>`` for 1-based mode indices.

    Nonzero only for opposite parity, where it equals
    ``(-1)^((j+k+1)/2) * 8 j k / (pi^2 (j^2 - k^2)^2)``.
    """
    if j < 1 or k < 1:
        raise ValueError("mode indices are 1-based")
    if (j + k) % 2 == 0:
        return 0.0
    sign = -1.0 if ((j + k + 1) // 2) % 2 else 1.0
    return sign * 8.0 * j * k / (math.pi**2 * (j * j - k * k) ** 2)


def dipole_matrix(M: int) -> np.ndarray:
    k = np.arange(1, M + 1)
    J, K = np.meshgrid(k, k, indexing="ij")
    odd = (J + K) % 2 == 1
    sign = np.where(((J + K + 1) // 2) % 2 == 1, -1.0, 1.0)
    # avoid 0/0 on the (zeroed) equal-parity entries
    den = np.where(odd, (J**2 - K**2).astype(float) ** 2, 1.0)
    return np.where(odd, sign * 8.0 * J * K / (math.pi**2 * den), 0.0)


@dataclass(frozen=True, eq=False)
class FreeBasis:
    """First ``M`` eigenmodes of the unperturbed well."""

    M: int
    lambdas: np.ndarray
    parity: np.ndarray
    dipole: np.ndarray

    @cached_property
    def dipole_eig(self) -> tuple[np.ndarray, np.ndarray]:
        """Eigen-decomposition ``X = W diag(xi) W^T`` used by the split step."""
        xi, W = np.linalg.eigh(self.dipole)
        return _frozen(xi), _frozen(W)

    def mode_values(self, x) -> np.ndarray:
        """Sample ``phi_1 .. phi_M`` at points ``x``; shape ``(M, len(x))``."""
        x = np.asarray(x, dtype=float)
        k = np.arange(1, self.M + 1)[:, None]
        odd = (k % 2 == 1)
        return math.sqrt(2.0) * np.where(odd, np.cos(k * math.pi * x), np.sin(k * math.pi * x))


def build_free_basis(M: int) -> FreeBasis:
    if int(M) != M or M < 2:
        raise InvalidTruncationError(f"truncation M must be an integer >= 2, got {M!r}")
    M = int(M)
    k = np.arange(1, M + 1)
    lambdas = k.astype(float) ** 2 * math.pi**2 / 2.0
    parity = np.where(k % 2 == 1, "even", "odd")
    return FreeBasis(M, _frozen(lambdas), _frozen(parity), _frozen(dipole_matrix(M)))


@dataclass(frozen=True, eq=False)
class SigmaEigenSystem:
    """Eigenpairs of ``A_sigma`` in the truncated free basis.

    Column ``k`` of ``vectors`` holds the free-basis coefficients of
    ``phi_{k+1,sigma}``; columns are signed so that ``vectors[k, k] > 0``.
    """

    sigma: float
    basis: FreeBasis
    mus: np.ndarray
    vectors: np.ndarray

    @property
    def M(self) -> int:
        return self.basis.M

    @property
    def dipole(self) -> np.ndarray:
        return self.basis.dipole

    @cached_property
    def dipole_sigma(self) -> np.ndarray:
        """``<x phi_{k,sigma}, phi_{j,sigma}>`` as a matrix (row j, column k)."""
        V = self.vectors
        return _frozen(V.T @ self.basis.dipole @ V)

    @property
    def gaps(self) -> np.ndarray:
        return np.diff(self.mus)

    def project(self, coeffs) -> np.ndarray:
        """Coordinates ``<psi, phi_{k,sigma}>`` of free-basis coefficients."""
        return self.vectors.T @ np.asarray(coeffs)


def _eigh_sigma(basis: FreeBasis, sigma: float):
    H = np.diag(basis.lambdas) - sigma * basis.dipole
    try:
        mus, V = np.linalg.eigh(H)
    except np.linalg.LinAlgError as exc:
        cond = np.linalg.cond(H) if np.all(np.isfinite(H)) else math.inf
        raise EigenSolverError(f"eigh failed at sigma={sigma}: {exc}", condition=cond) from exc
    V *= np.where(np.diagonal(V) < 0.0, -1.0, 1.0)
    return mus, V


def diagonalize_sigma(basis: FreeBasis, sigma: float, check: bool = True) -> SigmaEigenSystem:
    sigma = float(sigma)
    if not math.isfinite(sigma):
        raise DomainError(f"sigma must be finite, got {sigma}")
    mus, V = _eigh_sigma(basis, sigma)
    if check:
        if not (np.all(np.isfinite(mus)) and np.all(np.isfinite(V))):
            H = np.diag(basis.lambdas) - sigma * basis.dipole
            raise EigenSolverError(f"non-finite eigenpairs at sigma={sigma}",
                                   condition=np.linalg.cond(H))
        resid = np.max(np.abs(V.T @ V - np.eye(basis.M)))
        if resid > ORTHO_TOL:
            H = np.diag(basis.lambdas) - sigma * basis.dipole
            raise EigenSolverError(
                f"eigenvectors not orthonormal at sigma={sigma} (residual {resid:.3e})",
                condition=np.linalg.cond(H))
    return SigmaEigenSystem(sigma, basis, _frozen(mus), _frozen(V))


# --- perturbation theory -------------------------------------------------

def lambda2_coefficient(k: int) -> float:
    """Closed form ``1/(24 k^2) - 5/(8 pi^2 k^4)``.

    This equals :func:`lambda2_series` in the limit.  Both are written with
    the level spacing taken as ``(k^2 - j^2)/2``; for the operator with
    ``lambda_k = k^2 pi^2 / 2`` the second-order coefficient of
    ``lambda_{k,sigma}`` is this value divided by ``pi^2`` (see
    :func:`lambda2_galerkin`).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    return 1.0 / (24.0 * k**2) - 5.0 / (8.0 * math.pi**2 * k**4)


def lambda2_series(k: int, jmax: int) -> float:
    """Partial sum ``2^7/pi^4 sum_j k^2 j^2 / (k^2 - j^2)^5`` over ``j <= jmax``
    of parity opposite to ``k``."""
    if jmax < k + 1:
        raise ValueError("jmax must be >= k + 1")
    start = 1 if k % 2 == 0 else 2
    j = np.arange(start, jmax + 1, 2, dtype=float)
    kk = float(k) ** 2
    terms = kk * j**2 / (kk - j**2) ** 5
    # small terms first: the tail of the series is the large-j end
    return float(2.0**7 / math.pi**4 * math.fsum(terms[::-1]))


def lambda2_series_tail_bound(k: int, jmax: int) -> float:
    """Upper bound on the series remainder beyond ``jmax`` (valid for ``jmax >= 2k``)."""
    return 2.0**7 / math.pi**4 * k**2 / (2.0 * jmax**2)


def lambda2_galerkin(basis: FreeBasis, k: int) -> float:
    """Second-order Rayleigh-Schrodinger coefficient of the truncated operator,
    ``sum_{j != k} X_kj^2 / (lambda_k - lambda_j)``."""
    i = k - 1
    gaps = basis.lambdas[i] - basis.lambdas
    row = basis.dipole[i].copy()
    gaps[i] = 1.0
    row[i] = 0.0
    return float(np.sum(row**2 / gaps))


def level_shifts(sys: SigmaEigenSystem, kmax: int | None = None) -> np.ndarray:
    """``lambda_{k,sigma} - lambda_k`` for ``k <= kmax`` without cancellation.

    Differencing ``mus`` loses about ``eps * lambda_M`` absolutely; the
    Rayleigh quotient of ``diag(lambda - lambda_k) - sigma X`` on the computed
    eigenvector is accurate to the square of the vector error.
    """
    n = sys.M if kmax is None else kmax
    V = sys.vectors[:, :n]
    lam = sys.basis.lambdas
    XV = sys.basis.dipole @ V
    diag = (lam[:, None] - lam[None, :n]) * V - sys.sigma * XV
    return np.einsum("ik,ik->k", V, diag) / np.einsum("ik,ik->k", V, V)


class EigenDerivatives(NamedTuple):
    dlambda: np.ndarray
    dvectors: np.ndarray

    def in_free_basis(self, sys: SigmaEigenSystem) -> np.ndarray:
        """Free-basis coefficients of ``d phi_{k,sigma} / d sigma`` (column k)."""
        return sys.vectors @ self.dvectors


def _check_gaps(mus, tol=DEGENERACY_TOL):
    gaps = np.diff(mus)
    i = int(np.argmin(gaps))
    if gaps[i] < tol:
        raise DegeneracyError(f"modes {i + 1} and {i + 2} collide (gap {gaps[i]:.3e})",
                              pair=(i + 1, i + 2), gap=float(gaps[i]))


def eigen_derivatives(sys: SigmaEigenSystem, ncols: int | None = None) -> EigenDerivatives:
    """First-order sensitivities of the eigenpairs with respect to sigma.

    ``dvectors[j, k]`` is the coefficient of ``d phi_k / d sigma`` on
    ``phi_{j,sigma}``, i.e. ``<x phi_k, phi_j> / (lambda_j - lambda_k)`` off the
    diagonal and zero on it.  ``ncols`` restricts the computation to the first
    modes.
    """
    _check_gaps(sys.mus)
    n = sys.M if ncols is None else ncols
    Xs = sys.dipole_sigma[:, :n]
    gaps = sys.mus[:, None] - sys.mus[None, :n]
    idx = np.arange(n)
    gaps[idx, idx] = 1.0
    C = Xs / gaps
    C[idx, idx] = 0.0
    return EigenDerivatives(-np.diagonal(sys.dipole_sigma)[:n].copy(), C)


# --- frequency bookkeeping ----------------------------------------------

class GapReport(NamedTuple):
    delta: float
    closest: tuple[tuple[int, int], tuple[int, int]] | None
    degenerate: bool
    n_differences: int
    collisions: tuple = ()


def frequency_gap_check(basis: FreeBasis, sigma: float, N: int, k2max: int,
                        atol: float = 1e-8) -> GapReport:
    """Smallest distance between transition frequencies ``lambda_k1 - lambda_k2``.

    ``k1`` runs over ``1..N`` and ``k2`` over ``1..k2max`` with ``k1 != k2``;
    two differences with distinct index pairs closer than ``atol`` count as a
    collision, and every such couple is listed in ``collisions``.
    """
    if N > basis.M or k2max > basis.M:
        raise InvalidTruncationError(f"N={N} and k2max={k2max} must not exceed M={basis.M}")
    mus = diagonalize_sigma(basis, sigma).mus
    pairs = [(k1, k2) for k1 in range(1, N + 1) for k2 in range(1, k2max + 1) if k1 != k2]
    if len(pairs) < 2:
        return GapReport(math.inf, None, False, len(pairs))
    vals = np.array([mus[k1 - 1] - mus[k2 - 1] for k1, k2 in pairs])
    order = np.argsort(vals, kind="stable")
    diffs = np.diff(vals[order])
    i = int(np.argmin(diffs))
    delta = float(diffs[i])
    closest = (pairs[order[i]], pairs[order[i + 1]])
    collisions = []
    for a in range(len(order)):
        for b in range(a + 1, len(order)):
            if vals[order[b]] - vals[order[a]] > atol:
                break
            collisions.append((pairs[order[a]], pairs[order[b]]))
    return GapReport(delta, closest, delta <= atol, len(pairs), tuple(collisions))


def hs_sigma_norm(psi, sys: SigmaEigenSystem, s: float) -> float:
    """Truncated ``H^s_(sigma)`` norm ``(sum lambda_{k,sigma}^s |<psi, phi_{k,sigma}>|^2)^(1/2)``."""
    if s < 0:
        raise DomainError("s must be nonnegative")
    if np.any(sys.mus <= 0.0):
        raise DomainError(f"A_sigma is not positive at sigma={sys.sigma} "
                          f"(lambda_1,sigma = {sys.mus[0]:.6g})")
    c = getattr(psi, "coeffs", psi)
    d = sys.project(c)
    return float(np.sqrt(np.sum(sys.mus**s * np.abs(d) ** 2)))
