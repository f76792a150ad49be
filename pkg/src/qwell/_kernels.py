"""Hot loops written in the numpy subset numba compiles.

The functions run unchanged without numba (slower); arrays must be
C-contiguous float64 and complex state vectors are passed as real and
imaginary parts.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
else:
    HAVE_NUMBA = True


@njit(cache=True)
def eigh_signed(lambdas, X, sigma):
    """Eigenpairs of ``diag(lambdas) - sigma X`` with ``V[k, k] >= 0``."""
    H = np.diag(lambdas) - sigma * X
    mus, V = np.linalg.eigh(H)
    signs = np.where(np.diag(V) < 0.0, -1.0, 1.0)
    return mus, np.ascontiguousarray(V * signs)


@njit(cache=True)
def _theta(r, slope, cap):
    if r <= 0.0:
        return 0.0
    return min(slope * r, cap)


@njit(cache=True)
def _theta_prime(r, slope, cap):
    if r < 0.0:
        return 0.0
    return slope if slope * r <= cap else 0.0


@njit(cache=True)
def dlyap_dsigma(dr, di, mus, Xs, a):
    n = a.size
    M = mus.size
    gaps = mus.reshape((M, 1)) - mus[:n].reshape((1, n))
    for k in range(n):
        gaps[k, k] = 1.0
    C = np.ascontiguousarray(Xs[:, :n]) / gaps
    for k in range(n):
        C[k, k] = 0.0
    Ct = np.ascontiguousarray(C.T)
    er = Ct @ dr
    ei = Ct @ di
    return -2.0 * np.sum(a * (dr[:n] * er + di[:n] * ei))


@njit(cache=True)
def fixed_point(cr, ci, s, mus, V, lambdas, X, a, slope, cap, hi, tol, max_iter, newton):
    """Relaxed iteration for ``s = theta(V_s(psi))`` starting from the eigensystem
    ``(mus, V)`` at ``s``.

    Returns ``(s, mus, V, Xs, it, res, slope_at_s, converged, history)`` where
    ``history = (s_prev, p_prev, s_last, p_last)``.
    """
    n = a.size
    prev_res = np.inf
    hist = np.zeros(4)
    Xs = np.zeros_like(X)
    res = np.inf
    pislope = 0.0
    for it in range(1, max_iter + 1):
        if it > 1:
            mus, V = eigh_signed(lambdas, X, s)
        Vt = np.ascontiguousarray(V.T)
        dr = Vt @ cr
        di = Vt @ ci
        lyap = 1.0 - np.sum(a * (dr[:n] ** 2 + di[:n] ** 2))
        p = _theta(lyap, slope, cap)
        res = abs(p - s)
        hist[0] = hist[2]
        hist[1] = hist[3]
        hist[2] = s
        hist[3] = p
        tp = _theta_prime(lyap, slope, cap)
        Xs = Vt @ (X @ V)
        pislope = 0.0
        if (newton or res <= tol) and tp != 0.0:
            pislope = tp * dlyap_dsigma(dr, di, mus, Xs, a)
        if res <= tol:
            return s, mus, V, Xs, it, res, pislope, True, hist
        if newton and pislope < 1.0 and res < prev_res:
            s_new = s + (p - s) / (1.0 - pislope)
        else:
            s_new = p
        prev_res = res
        s = min(max(s_new, 0.0), hi)
    return s, mus, V, Xs, max_iter, res, pislope, False, hist
