"""Line-based ``key=value`` run configuration and scenario presets.

Blank lines and ``#`` comments are ignored.  Real-valued keys accept
multiples of pi (``T=150*pi``).  ``initial`` is a semicolon list of
``k:re:im`` amplitudes; ``initial_basis`` says whether they refer to the
eigenbasis of the target operator (default) or to the free modes.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .feedback import (FeedbackConfig, FixedSigma, ImplicitSigma, ThetaSpec, calibrate_cstar,
                       theory_safe_theta)
from .propagator import InitialState, SimulationConfig
from .spectral import build_free_basis, diagonalize_sigma

CHECKS = ("norm", "convergence", "stall", "decrease", "oracle")

_INT_KEYS = {"M", "N", "record_every"}
_FLOAT_KEYS = {"dt", "T", "epsilon", "gain", "sigma", "theta_eta", "theta_max"}
_STR_KEYS = {"scenario", "theta_mode", "initial", "initial_basis", "checks", "out",
             "control_sampling"}
KEYS = _INT_KEYS | _FLOAT_KEYS | _STR_KEYS

BASE = {
    "M": 20, "dt": 1e-3, "N": 3, "epsilon": 0.05, "gain": 1e3,
    "initial": "1:1:0;3:1:0", "initial_basis": "target", "record_every": 1,
    "control_sampling": "hold", "checks": "norm",
}

PRESETS = {
    "fig1": {"sigma": 20.0, "T": 150 * math.pi, "checks": "norm,convergence"},
    "fig2": {"theta_eta": 700.0, "theta_mode": "paper_sim", "T": 1000 * math.pi,
             "checks": "norm,convergence"},
    "stall": {"sigma": 0.0, "T": 10 * math.pi, "checks": "norm,stall"},
}

# samples used to calibrate the theory-safe caps
CALIBRATION_SIGMAS = tuple(np.round(np.linspace(0.0, 1.0, 21), 12))

_PI_RE = re.compile(r"^\s*(?:([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*\*?\s*)?pi\s*$")


@dataclass(frozen=True)
class RunSpec:
    """A parsed configuration: the simulation plus run-level settings."""

    config: SimulationConfig
    checks: tuple[str, ...]
    out: str | None = None
    scenario: str | None = None


def _real(text: str) -> float:
    m = _PI_RE.match(text)
    if m:
        return (float(m.group(1)) if m.group(1) else 1.0) * math.pi
    return float(text)


def _convert(key: str, text: str, line: int | None):
    try:
        if key in _INT_KEYS:
            value = float(text)
            if value != int(value):
                raise ValueError
            return int(value)
        if key in _FLOAT_KEYS:
            value = _real(text)
            if not math.isfinite(value):
                raise ValueError
            return value
    except ValueError:
        kind = "an integer" if key in _INT_KEYS else "a real number"
        raise ConfigError(f"{key} must be {kind}, got {text!r}", line) from None
    return text.strip()


def parse_initial(text: str, line: int | None = None) -> tuple:
    modes = []
    for part in filter(None, (p.strip() for p in text.split(";"))):
        fields = part.split(":")
        if len(fields) not in (2, 3):
            raise ConfigError(f"initial entry {part!r} must be k:re or k:re:im", line)
        try:
            k = int(fields[0])
            z = complex(float(fields[1]), float(fields[2]) if len(fields) == 3 else 0.0)
        except ValueError:
            raise ConfigError(f"initial entry {part!r} is not numeric", line) from None
        modes.append((k, z))
    if not modes:
        raise ConfigError("initial state is empty", line)
    return tuple(modes)


def _read(text: str) -> tuple[dict, dict]:
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected key=value, got {body!r}", lineno)
        key, _, val = (s.strip() for s in body.partition("="))
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r} (first set on line {lines[key]})", lineno)
        values[key] = _convert(key, val, lineno)
        lines[key] = lineno
    return values, lines


def resolve(values: dict, lines: dict | None = None) -> RunSpec:
    """Apply presets and defaults to explicit ``values`` and validate."""
    lines = lines or {}

    def fail(msg, *keys):
        line = min((lines[k] for k in keys if k in lines), default=None)
        raise ConfigError(msg, line)

    scenario = values.get("scenario")
    if scenario is not None and scenario not in PRESETS:
        fail(f"unknown scenario {scenario!r} (choose from {', '.join(PRESETS)})", "scenario")
    if "sigma" in values and "theta_eta" in values:
        fail("sigma (fixed mode) and theta_eta (implicit mode) are mutually exclusive",
             "sigma", "theta_eta")
    merged = dict(BASE)
    preset = dict(PRESETS.get(scenario, {}))
    # an explicit mode choice replaces the preset's
    if "sigma" in values:
        for k in ("theta_eta", "theta_mode", "theta_max"):
            preset.pop(k, None)
    if "theta_eta" in values:
        preset.pop("sigma", None)
    merged.update(preset)
    merged.update(values)
    implicit = "theta_eta" in merged
    if not implicit:
        for k in ("theta_mode", "theta_max"):
            if k in values:
                fail(f"{k} requires theta_eta (implicit mode)", k)
        merged.setdefault("sigma", 0.0)
    if "T" not in merged:
        fail("T is required when no scenario is given")

    eps = merged["epsilon"]
    if not 0.0 < eps < 1.0:
        fail(f"epsilon must lie in (0,1), got {eps}", "epsilon")
    for key in ("dt", "T", "gain"):
        if not merged[key] > 0:
            fail(f"{key} must be positive, got {merged[key]}", key)
    for key in ("M", "N", "record_every"):
        if merged[key] < 1:
            fail(f"{key} must be a positive integer, got {merged[key]}", key)
    if merged["M"] < 2:
        fail("M must be at least 2", "M")
    if merged["N"] > merged["M"]:
        fail(f"N={merged['N']} exceeds M={merged['M']}", "N", "M")
    if merged["T"] < merged["dt"]:
        fail("T must be >= dt", "T", "dt")
    if merged["initial_basis"] not in ("target", "free"):
        fail("initial_basis must be 'target' or 'free'", "initial_basis")
    if merged["control_sampling"] not in ("hold", "midpoint"):
        fail("control_sampling must be 'hold' or 'midpoint'", "control_sampling")
    modes = parse_initial(merged["initial"], lines.get("initial"))
    for k, _ in modes:
        if not 1 <= k <= merged["M"]:
            fail(f"initial mode {k} outside 1..{merged['M']}", "initial")
    checks = tuple(c.strip() for c in merged["checks"].split(",") if c.strip())
    for c in checks:
        if c not in CHECKS:
            fail(f"unknown check {c!r} (choose from {', '.join(CHECKS)})", "checks")
    initial = InitialState(modes, merged["initial_basis"])

    if implicit:
        mode = merged.get("theta_mode", "paper_sim")
        if mode not in ("paper_sim", "theory_safe"):
            fail(f"theta_mode must be paper_sim or theory_safe, got {mode!r}", "theta_mode")
        eta = merged["theta_eta"]
        cap = merged.get("theta_max", math.inf)
        if eta < 0 or cap < 0:
            fail("theta parameters must be nonnegative", "theta_eta", "theta_max")
        if mode == "theory_safe":
            theta = _theory_safe(eta, cap, merged, initial, fail)
        else:
            theta = ThetaSpec(eta=eta, theta_max=cap)
        sigma_mode = ImplicitSigma(theta)
    else:
        sigma_mode = FixedSigma(merged["sigma"])
    try:
        fb = FeedbackConfig(merged["N"], eps, merged["gain"], sigma_mode)
        config = SimulationConfig(fb, M=merged["M"], dt=merged["dt"], T=merged["T"],
                                  initial=initial, record_every=merged["record_every"],
                                  control_sampling=merged["control_sampling"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return RunSpec(config, checks, merged.get("out"), scenario)


def _theory_safe(eta, cap, merged, initial, fail) -> ThetaSpec:
    """Caps from the sampled constants, with gamma = initial overlap with phi_1."""
    M, N, eps = merged["M"], merged["N"], merged["epsilon"]
    basis = build_free_basis(M)
    amps = np.zeros(M, dtype=complex)
    for k, z in initial.modes:
        amps[k - 1] += z
    if not np.any(amps):
        fail("initial state has zero norm", "initial")
    # at sigma = 0 the target basis is the free one
    c = amps / np.linalg.norm(amps)
    gamma = float(abs(diagonalize_sigma(basis, 0.0).project(c)[0]))
    if gamma == 0.0:
        fail("theory_safe needs an initial state overlapping phi_1", "initial")
    consts = calibrate_cstar(basis, CALIBRATION_SIGMAS, kmax=M, N=N)
    spec = theory_safe_theta(eta, N, eps, min(gamma, 1.0 - 1e-15), consts)
    return ThetaSpec(eta=eta, theta_max=min(cap, spec.theta_max), slope_max=spec.slope_max,
                     mode="theory_safe")


def parse_run(text: str) -> RunSpec:
    values, lines = _read(text)
    return resolve(values, lines)


def parse_config(text: str) -> SimulationConfig:
    return parse_run(text).config


def preset_config(name: str, **overrides) -> RunSpec:
    return resolve({"scenario": name, **overrides})


def dump_config(config: SimulationConfig, checks=("norm",), out: str | None = None) -> str:
    """Fully resolved configuration text; ``parse_config`` of it returns ``config``."""
    fb = config.feedback
    lines = [
        f"M={config.M}",
        f"dt={config.dt!r}",
        f"T={config.T!r}",
        f"N={fb.N}",
        f"epsilon={fb.epsilon!r}",
        f"gain={fb.gain!r}",
    ]
    if isinstance(fb.sigma_mode, FixedSigma):
        lines.append(f"sigma={fb.sigma_mode.sigma!r}")
    else:
        th = fb.sigma_mode.theta
        lines.append(f"theta_eta={th.eta!r}")
        lines.append(f"theta_mode={th.mode}")
        if math.isfinite(th.theta_max):
            lines.append(f"theta_max={th.theta_max!r}")
    init = ";".join(f"{k}:{z.real!r}:{z.imag!r}" for k, z in config.initial.modes)
    lines += [
        f"initial={init}",
        f"initial_basis={config.initial.basis}",
        f"record_every={config.record_every}",
        f"control_sampling={config.control_sampling}",
        f"checks={','.join(checks)}",
    ]
    if out is not None:
        lines.append(f"out={out}")
    return "\n".join(lines) + "\n"
