"""Closed-loop time stepping of the Galerkin system.

One step of length ``dt`` with field ``u = sigma + v`` is the symmetric
splitting

    exp(-i dt A_sigma / 2) exp(i dt v x) exp(-i dt A_sigma / 2),

each factor applied exactly in its own eigenbasis (``A_sigma`` in the
``phi_{k,sigma}`` basis, ``x`` in the eigenbasis of the dipole matrix).
By default feedback values are sampled at the start of the step and held
over it (``control_sampling="hold"``, first order in the closed loop).
``"midpoint"`` first takes a held half step, re-evaluates the feedback there
and uses that value for the full step, which makes the closed loop second
order at twice the cost.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import LyapunovIncreaseError, PrepumpError, SimulationDiverged
from .feedback import (FeedbackConfig, FixedSigma, WaveFunction, _coeffs, _lyap_from_proj,
                       implicit_sigma)
from .spectral import FreeBasis, SigmaEigenSystem, build_free_basis, diagonalize_sigma

SCHEME = "strang-split/galerkin/sample-and-hold"
SCHEME_MIDPOINT = "strang-split/galerkin/midpoint-sampling"


@dataclass(frozen=True)
class InitialState:
    """Mode amplitudes ``((k, z), ...)``.

    ``basis="target"`` means the eigenbasis of the operator being stabilized
    around (``phi_{k,sigma}`` for a fixed sigma, ``phi_k`` in implicit mode);
    ``basis="free"`` always means ``phi_k``.
    """

    modes: tuple = ((1, 1.0), (3, 1.0))
    basis: str = "target"

    def __post_init__(self):
        if self.basis not in ("target", "free"):
            raise ValueError(f"initial basis must be 'target' or 'free', not {self.basis!r}")
        object.__setattr__(self, "modes", tuple((int(k), complex(z)) for k, z in self.modes))
        if not self.modes:
            raise ValueError("initial state needs at least one mode")


@dataclass(frozen=True)
class SimulationConfig:
    feedback: FeedbackConfig
    M: int = 20
    dt: float = 1e-3
    T: float = 150 * math.pi
    initial: InitialState = InitialState()
    record_every: int = 1
    control_sampling: str = "hold"

    def __post_init__(self):
        if int(self.M) != self.M or self.M < 2:
            raise ValueError(f"M must be an integer >= 2, got {self.M!r}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.T >= self.dt:
            raise ValueError(f"T must be >= dt (T={self.T}, dt={self.dt})")
        if int(self.record_every) != self.record_every or self.record_every < 1:
            raise ValueError("record_every must be a positive integer")
        if self.control_sampling not in ("hold", "midpoint"):
            raise ValueError(f"control_sampling must be 'hold' or 'midpoint', "
                             f"not {self.control_sampling!r}")
        if self.feedback.N > self.M:
            raise ValueError(f"cutoff N={self.feedback.N} exceeds M={self.M}")
        for k, _ in self.initial.modes:
            if not 1 <= k <= self.M:
                raise ValueError(f"initial mode {k} outside 1..{self.M}")

    @property
    def target_sigma(self) -> float:
        mode = self.feedback.sigma_mode
        return mode.sigma if isinstance(mode, FixedSigma) else 0.0

    @property
    def n_steps(self) -> int:
        return int(math.ceil(self.T / self.dt - 1e-9))


def initial_wavefunction(config: SimulationConfig, basis: FreeBasis | None = None) -> WaveFunction:
    basis = basis or build_free_basis(config.M)
    sys = None
    if config.initial.basis == "target":
        sys = diagonalize_sigma(basis, config.target_sigma)
    return WaveFunction.from_modes(config.M, config.initial.modes, sys=sys)


class Record(NamedTuple):
    t: float
    sigma: float
    v: float
    u: float
    lyapunov: float
    populations: np.ndarray
    norm: float
    dist_c1: float


@dataclass(eq=False)
class TimeSeries:
    """Sampled trajectory.  Arrays are aligned; row ``i`` describes the state at
    ``t[i]``; ``v`` and ``u`` are the feedback law evaluated on that state
    (with hold sampling, also the control applied over the next step).
    ``step_sigma``/``step_v`` hold the values actually applied per step.

    ``overlap`` is ``|<psi, phi_1>|`` for the target operator, ``mu`` and
    ``iterations``/``residual`` are filled in implicit mode only.
    """

    t: np.ndarray
    sigma: np.ndarray
    v: np.ndarray
    u: np.ndarray
    lyapunov: np.ndarray
    populations: np.ndarray
    norm: np.ndarray
    dist_c1: np.ndarray
    overlap: np.ndarray
    mu: np.ndarray
    iterations: np.ndarray
    residual: np.ndarray
    final_state: WaveFunction
    metadata: dict = field(default_factory=dict)
    states: np.ndarray | None = None
    step_sigma: np.ndarray | None = None
    step_v: np.ndarray | None = None

    def __len__(self):
        return self.t.size

    @property
    def records(self) -> list[Record]:
        return [Record(*row) for row in zip(self.t, self.sigma, self.v, self.u, self.lyapunov,
                                            self.populations, self.norm, self.dist_c1)]

    @property
    def target_population(self) -> np.ndarray:
        return self.overlap**2


_FIELDS = ("t", "sigma", "v", "u", "lyapunov", "populations", "norm", "dist_c1",
           "overlap", "mu", "iterations", "residual")


def decrease_tolerance(dt: float, v: float, sigma: float) -> float:
    """Per-step slack allowed in the Lyapunov decrease check."""
    return 10.0 * abs(dt) ** 3 * (1.0 + abs(v) * abs(sigma))


def split_step(psi, sys: SigmaEigenSystem, v: float, dt: float):
    """One splitting step for ``u = sys.sigma + v``; returns the same type as ``psi``."""
    c = _coeffs(psi)
    V = sys.vectors
    h = np.exp(-0.5j * dt * sys.mus)
    c = V @ (h * (V.T @ c))
    if v != 0.0:
        xi, W = sys.basis.dipole_eig
        c = W @ (np.exp(1j * dt * v * xi) * (W.T @ c))
    c = V @ (h * (V.T @ c))
    return WaveFunction(c) if isinstance(psi, WaveFunction) else c


def dist_to_circle(psi, sys: SigmaEigenSystem, k: int = 1) -> float:
    """L2 distance from ``psi`` to ``{phi_{k,sigma} e^{i a}}`` (unit-norm psi)."""
    d = sys.project(_coeffs(psi))
    return math.sqrt(max(0.0, 2.0 - 2.0 * abs(d[k - 1])))


# --- closed loop ----------------------------------------------------------

class _Recorder:
    def __init__(self, n_rows: int, N: int, keep_states: int | None):
        self.i = 0
        self.data = {name: np.zeros(n_rows) for name in _FIELDS}
        self.data["populations"] = np.zeros((n_rows, N))
        self.data["iterations"] = np.zeros(n_rows, dtype=int)
        self.data["mu"][:] = np.nan
        self.data["residual"][:] = np.nan
        self.states = np.zeros((n_rows, keep_states), dtype=complex) if keep_states else None

    def add(self, state, **row):
        i = self.i
        for name, val in row.items():
            self.data[name][i] = val
        if self.states is not None:
            self.states[i] = state
        self.i += 1

    def trimmed(self):
        n = self.i
        out = {name: arr[:n].copy() for name, arr in self.data.items()}
        return out, (None if self.states is None else self.states[:n].copy())


def simulate_closed_loop(config: SimulationConfig, *, stop_distance: float | None = None,
                         check_decrease: bool = True, keep_states: bool = False,
                         keep_controls: bool = False, tol: float = 1e-12,
                         max_iter: int = 100, progress=None) -> TimeSeries:
    """Run the feedback loop until ``t >= T``.

    ``stop_distance`` ends the run early, once ``1 - |<psi, phi_1>|^2`` (target
    operator) drops to that value.  With ``check_decrease`` a Lyapunov increase
    beyond :func:`decrease_tolerance` between consecutive steps raises
    :class:`LyapunovIncreaseError`.  ``keep_controls`` stores the per-step
    ``sigma`` and ``v`` needed to replay the run open-loop.
    """
    basis = build_free_basis(config.M)
    psi0 = initial_wavefunction(config, basis)
    fb = config.feedback
    n_steps = config.n_steps
    n_rows = n_steps // config.record_every + 2
    rec = _Recorder(n_rows, fb.N, config.M if keep_states else None)
    steps = (np.zeros(n_steps), np.zeros(n_steps)) if keep_controls else None
    t_start = time.perf_counter()
    if isinstance(fb.sigma_mode, FixedSigma):
        stats, final = _run_fixed(config, basis, psi0.coeffs, rec, steps, stop_distance,
                                  check_decrease, progress)
    else:
        stats, final = _run_implicit(config, basis, psi0.coeffs, rec, steps, stop_distance,
                                     check_decrease, tol, max_iter, progress)
    data, states = rec.trimmed()
    meta = {
        "scheme": SCHEME if config.control_sampling == "hold" else SCHEME_MIDPOINT,
        "M": config.M,
        "dt": config.dt,
        "T": config.T,
        "N": fb.N,
        "epsilon": fb.epsilon,
        "gain": fb.gain,
        "mode": "implicit" if fb.implicit else "fixed",
        "wall_time": time.perf_counter() - t_start,
        **stats,
    }
    if steps is not None:
        n = stats["steps"]
        steps = (steps[0][:n].copy(), steps[1][:n].copy())
    return TimeSeries(**data, final_state=WaveFunction(final), metadata=meta, states=states,
                      step_sigma=None if steps is None else steps[0],
                      step_v=None if steps is None else steps[1])


def _diverged(t, last_good):
    raise SimulationDiverged(f"non-finite state at t={t:.6g}", t=t, last_good=last_good)


def _run_fixed(config, basis, c0, rec, steps, stop_distance, check_decrease, progress):
    fb = config.feedback
    sigma, dt, N, gain = config.target_sigma, config.dt, fb.N, fb.gain
    a = fb.weights
    sys = diagonalize_sigma(basis, sigma)
    V, Xs = sys.vectors, sys.dipole_sigma
    XsN = np.ascontiguousarray(Xs[:N])
    xi, W = basis.dipole_eig
    Ws = V.T @ W  # eigenvectors of x in sigma coordinates
    WsT = np.ascontiguousarray(Ws.T)
    h = np.exp(-0.5j * dt * sys.mus)
    hq = np.exp(-0.25j * dt * sys.mus)
    ixi = 1j * dt * xi
    midpoint = config.control_sampling == "midpoint"
    d = V.T @ c0
    n_steps, every = config.n_steps, config.record_every
    prev_lyap, prev_tol = math.inf, 0.0
    worst, n_up = 0.0, 0
    n = 0
    for n in range(n_steps + 1):
        dN = d[:N]
        v = -gain * float(np.dot(a, ((XsN @ d) * dN.conjugate()).imag))
        lyap = 1.0 - float(np.dot(a, dN.real**2 + dN.imag**2))
        if not math.isfinite(v):
            _diverged(n * dt, V @ prev_d)
        if lyap > prev_lyap:
            n_up += 1
            ratio = (lyap - prev_lyap) / prev_tol if prev_tol > 0 else math.inf
            worst = max(worst, ratio)
            if check_decrease and ratio > 1.0:
                raise LyapunovIncreaseError(
                    f"Lyapunov value rose by {lyap - prev_lyap:.3e} at t={n * dt:.6g} "
                    f"(allowed {prev_tol:.3e})", t=n * dt, increase=lyap - prev_lyap,
                    tolerance=prev_tol)
        ov = abs(d[0])
        done = stop_distance is not None and 1.0 - ov * ov <= stop_distance
        if n % every == 0 or n == n_steps or done:
            rec.add(V @ d, t=n * dt, sigma=sigma, v=v, u=sigma + v, lyapunov=lyap,
                    populations=dN.real**2 + dN.imag**2, norm=float(np.linalg.norm(d)),
                    dist_c1=math.sqrt(max(0.0, 2.0 - 2.0 * ov)), overlap=ov)
        if n == n_steps or done:
            break
        if midpoint:
            dm = hq * d
            if v != 0.0:
                dm = Ws @ (np.exp(0.5 * v * ixi) * (WsT @ dm))
            dm = hq * dm
            v = -gain * float(np.dot(a, ((XsN @ dm) * dm[:N].conjugate()).imag))
        if steps is not None:
            steps[0][n] = sigma
            steps[1][n] = v
        prev_lyap, prev_tol, prev_d = lyap, decrease_tolerance(dt, v, sigma), d
        d = h * d
        if v != 0.0:
            d = Ws @ (np.exp(v * ixi) * (WsT @ d))
        d = h * d
        if progress is not None and n % 100000 == 0:
            progress(n * dt, 1.0 - ov * ov)
    return {"steps": n, "lyapunov_increases": n_up, "worst_increase_ratio": worst}, V @ d


def _run_implicit(config, basis, c, rec, steps, stop_distance, check_decrease, tol, max_iter,
                  progress):
    fb = config.feedback
    dt, N, gain = config.dt, fb.N, fb.gain
    a = fb.weights
    xi, W = basis.dipole_eig
    WT = np.ascontiguousarray(W.T)
    midpoint = config.control_sampling == "midpoint"
    n_steps, every = config.n_steps, config.record_every
    prev_lyap, prev_tol = math.inf, 0.0
    worst, n_up, max_it, worst_res = 0.0, 0, 0, 0.0
    warm = None
    n = 0
    for n in range(n_steps + 1):
        sol = implicit_sigma(c, basis, fb, tol=tol, max_iter=max_iter, warm=warm)
        warm = sol.system
        s, it, res, slope = sol.sigma, sol.iterations, sol.residual, sol.slope
        mus, V, Xs = warm.mus, warm.vectors, warm.dipole_sigma
        d = V.T @ c
        max_it = max(max_it, it)
        worst_res = max(worst_res, res)
        dN = d[:N]
        lyap = _lyap_from_proj(d, a)
        v = -gain * float(np.dot(a, ((Xs[:N] @ d) * dN.conjugate()).imag))
        if not math.isfinite(v):
            _diverged(n * dt, c)
        if lyap > prev_lyap:
            n_up += 1
            ratio = (lyap - prev_lyap) / prev_tol if prev_tol > 0 else math.inf
            worst = max(worst, ratio)
            if check_decrease and ratio > 1.0:
                raise LyapunovIncreaseError(
                    f"Lyapunov value rose by {lyap - prev_lyap:.3e} at t={n * dt:.6g} "
                    f"(allowed {prev_tol:.3e})", t=n * dt, increase=lyap - prev_lyap,
                    tolerance=prev_tol)
        ov = abs(c[0])
        done = stop_distance is not None and 1.0 - ov * ov <= stop_distance
        if n % every == 0 or n == n_steps or done:
            rec.add(c, t=n * dt, sigma=s, v=v, u=s + v, lyapunov=lyap,
                    populations=dN.real**2 + dN.imag**2, norm=float(np.linalg.norm(c)),
                    dist_c1=math.sqrt(max(0.0, 2.0 - 2.0 * ov)), overlap=ov,
                    mu=1.0 / (1.0 - slope), iterations=it, residual=res)
        if n == n_steps or done:
            break
        if midpoint:
            cm = _advance(c, mus, V, v, 0.5 * dt, W, WT, xi)
            mid = implicit_sigma(cm, basis, fb, tol=tol, max_iter=max_iter, warm=warm)
            max_it = max(max_it, mid.iterations)
            worst_res = max(worst_res, mid.residual)
            warm = mid.system
            s, mus, V = mid.sigma, warm.mus, warm.vectors
            dm = V.T @ cm
            v = -gain * float(np.dot(a, ((warm.dipole_sigma[:N] @ dm)
                                         * dm[:N].conjugate()).imag))
        if steps is not None:
            steps[0][n] = s
            steps[1][n] = v
        prev_lyap, prev_tol = lyap, decrease_tolerance(dt, v, s)
        c = _advance(c, mus, V, v, dt, W, WT, xi)
        if progress is not None and n % 100000 == 0:
            progress(n * dt, 1.0 - ov * ov)
    stats = {"steps": n, "lyapunov_increases": n_up, "worst_increase_ratio": worst,
             "max_iterations": max_it, "max_residual": worst_res}
    return stats, c


def _advance(c, mus, V, v, dt, W, WT, xi):
    h = np.exp(-0.5j * dt * mus)
    c = V @ (h * (V.T @ c))
    if v != 0.0:
        c = W @ (np.exp(1j * dt * v * xi) * (WT @ c))
    return V @ (h * (V.T @ c))


# --- open-loop helpers ----------------------------------------------------

def replay_controls(basis: FreeBasis, c0, step_sigma, step_v, dt: float) -> np.ndarray:
    """Propagate ``c0`` open-loop through recorded per-step ``(sigma, v)``."""
    c = np.asarray(c0, dtype=complex)
    if basis.M > c.size:
        c = np.concatenate([c, np.zeros(basis.M - c.size, dtype=complex)])
    xi, W = basis.dipole_eig
    cache_sigma, sys = None, None
    for s, v in zip(step_sigma, step_v):
        if s != cache_sigma:
            sys = diagonalize_sigma(basis, s, check=False)
            V, h = sys.vectors, np.exp(-0.5j * dt * sys.mus)
            cache_sigma = s
        c = V @ (h * (V.T @ c))
        if v != 0.0:
            c = W @ (np.exp(1j * dt * v * xi) * (W.T @ c))
        c = V @ (h * (V.T @ c))
    return c


class PrepumpResult(NamedTuple):
    times: np.ndarray
    control: np.ndarray
    state: WaveFunction
    overlap: float


def resonance_prepump(psi, sys: SigmaEigenSystem, target_overlap: float, amplitude: float = 1.0,
                      dt: float = 1e-3, horizon: float | None = None,
                      threshold: float = 1e-12) -> PrepumpResult:
    """Drive ``u = sigma + A cos((lambda_j - lambda_1) t)`` open-loop, with ``j``
    the lowest populated excited mode, until ``|<psi, phi_1>| >= target_overlap``.

    ``control`` holds ``u`` at the start of each step (sample-and-hold).
    """
    wf = psi if isinstance(psi, WaveFunction) else WaveFunction(psi)
    d = sys.project(wf.coeffs)
    if abs(d[0]) >= target_overlap:
        return PrepumpResult(np.zeros(0), np.zeros(0), wf, float(abs(d[0])))
    populated = np.nonzero(np.abs(d[1:]) > threshold)[0]
    if populated.size == 0:
        raise PrepumpError("state has no populated mode to pump from")
    j = int(populated[0]) + 2
    omega = sys.mus[j - 1] - sys.mus[0]
    if horizon is None:
        horizon = 200.0 * 2.0 * math.pi / omega
    if amplitude == 0.0:
        raise PrepumpError("zero drive amplitude cannot transfer population")
    n_max = int(math.ceil(horizon / dt))
    c = wf.coeffs
    times, control = [], []
    for n in range(n_max):
        t = n * dt
        v = amplitude * math.cos(omega * t)
        times.append(t)
        control.append(sys.sigma + v)
        c = split_step(c, sys, v, dt)
        ov = abs(sys.project(c)[0])
        if ov >= target_overlap:
            return PrepumpResult(np.array(times), np.array(control), WaveFunction(c), float(ov))
    raise PrepumpError(f"overlap {ov:.3e} < {target_overlap} after horizon {horizon:.6g}")
