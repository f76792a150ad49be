"""Command-line entry point ``qwell``.

Exit codes: 0 success, 1 a requested check failed, 2 configuration error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import (KEYS, RunSpec, _convert, _read, dump_config, parse_run, preset_config,
                     resolve)
from .errors import ConfigError, NumericError, PrepumpError, QwellError
from .propagator import (SCHEME, SCHEME_MIDPOINT, TimeSeries, resonance_prepump,
                         simulate_closed_loop)
from .spectral import build_free_basis, diagonalize_sigma, frequency_gap_check
from .feedback import WaveFunction
from .verification import (CheckReport, _bundle, check_decrease_rate, check_perturbation_suite,
                           convergence_report, cross_validate)

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

NORM_TOL = 1e-9
STALL_V_TOL = 1e-10
STALL_POP_TOL = 1e-9


@dataclass
class RunManifest:
    config_path: str | None
    spec: RunSpec
    outputs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @property
    def scheme(self) -> str:
        return SCHEME if self.spec.config.control_sampling == "hold" else SCHEME_MIDPOINT

    def to_text(self) -> str:
        lines = [f"config_path={self.config_path}", f"scheme={self.scheme}"]
        lines += [f"output.{k}={v}" for k, v in sorted(self.outputs.items())]
        lines += [f"timing.{k}={v!r}" for k, v in sorted(self.timings.items())]
        return "\n".join(lines) + "\n"


# --- output -----------------------------------------------------------------

def timeseries_header(N: int) -> str:
    pops = ",".join(f"pop{k}" for k in range(1, N + 1))
    return f"t,sigma,v,u,lyapunov,{pops},norm,dist_c1"


def emit_timeseries(ts: TimeSeries, path) -> None:
    table = np.column_stack([ts.t, ts.sigma, ts.v, ts.u, ts.lyapunov, ts.populations,
                             ts.norm, ts.dist_c1])
    # adding 0.0 maps -0 to 0 so degenerate columns print as zeros
    np.savetxt(path, table + 0.0, fmt="%.17g", delimiter=",",
               header=timeseries_header(ts.populations.shape[1]), comments="")


# --- checks over a finished run -------------------------------------------

def norm_check(ts: TimeSeries) -> CheckReport:
    drift = float(np.max(np.abs(ts.norm - 1.0)))
    i = int(np.argmax(np.abs(ts.norm - 1.0)))
    return CheckReport("norm", drift <= NORM_TOL, {"max_drift": drift}, {"max_drift": NORM_TOL},
                       {}, None if drift <= NORM_TOL else {"t": float(ts.t[i])})


def stall_check(ts: TimeSeries) -> CheckReport:
    vmax = float(np.max(np.abs(ts.v)))
    pop_spread = float(np.max(np.ptp(ts.populations, axis=0)))
    ok = vmax <= STALL_V_TOL and pop_spread <= STALL_POP_TOL
    return CheckReport("stall", ok, {"max_abs_v": vmax, "population_spread": pop_spread},
                       {"max_abs_v": STALL_V_TOL, "population_spread": STALL_POP_TOL})


def run_checks(spec: RunSpec, ts: TimeSeries) -> CheckReport:
    reports = []
    for name in spec.checks:
        if name == "norm":
            reports.append(norm_check(ts))
        elif name == "convergence":
            reports.append(convergence_report(ts, spec.config.feedback.epsilon))
        elif name == "stall":
            reports.append(stall_check(ts))
        elif name == "decrease":
            reports.append(check_decrease_rate(ts))
        elif name == "oracle":
            reports.append(cross_validate(spec.config, ts))
    return _bundle("run", reports, {"scheme": ts.metadata["scheme"]})


def run(manifest: RunManifest, out: str | None = None) -> int:
    """Simulate, check and write ``timeseries.csv``, ``report.txt``,
    ``config.txt`` and ``manifest.txt`` into the output directory."""
    spec = manifest.spec
    out = out or spec.out
    if "decrease" in spec.checks and spec.config.record_every != 1:
        raise ConfigError("the decrease check needs record_every=1")
    t0 = time.perf_counter()
    ts = simulate_closed_loop(spec.config, keep_controls="oracle" in spec.checks)
    manifest.timings["simulate"] = time.perf_counter() - t0
    t1 = time.perf_counter()
    report = run_checks(spec, ts)
    manifest.timings["checks"] = time.perf_counter() - t1
    text = report.to_text()
    print(text)
    if out:
        os.makedirs(out, exist_ok=True)
        paths = {name: os.path.join(out, name) for name in
                 ("timeseries.csv", "report.txt", "config.txt", "manifest.txt")}
        emit_timeseries(ts, paths["timeseries.csv"])
        with open(paths["report.txt"], "w") as fh:
            fh.write(text + "\n")
        with open(paths["config.txt"], "w") as fh:
            fh.write(dump_config(spec.config, spec.checks))
        manifest.outputs.update(paths)
        with open(paths["manifest.txt"], "w") as fh:
            fh.write(manifest.to_text())
    return EXIT_OK if report.passed else EXIT_CHECK


# --- subcommands ------------------------------------------------------------

def _spec_from_args(args) -> tuple[RunSpec, str | None]:
    text = ""
    if args.config:
        with open(args.config) as fh:
            text = fh.read()
    values, lines = _read(text)
    if args.scenario:
        values["scenario"] = args.scenario
    # command-line settings replace file entries
    for item in args.set or ():
        key, sep, val = (s.strip() for s in item.partition("="))
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _convert(key, val, None)
        lines.pop(key, None)
    if args.checks:
        values["checks"] = args.checks
        lines.pop("checks", None)
    return resolve(values, lines), args.config


def cmd_simulate(args) -> int:
    spec, path = _spec_from_args(args)
    return run(RunManifest(path, spec), out=args.out)


def cmd_verify(args) -> int:
    if args.what == "spectrum":
        report = check_perturbation_suite(args.mbig)
    elif args.what == "decrease":
        spec = preset_config(args.scenario, dt=args.dt, T=args.T, control_sampling=args.sampling,
                             record_every=1)
        report = check_decrease_rate(simulate_closed_loop(spec.config))
    else:
        spec = preset_config("fig1", M=args.M, dt=args.dt, T=args.T)
        ts = simulate_closed_loop(spec.config, keep_controls=True)
        report = cross_validate(spec.config, ts, n=args.n)
    print(report.to_text())
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_gap_check(args) -> int:
    basis = build_free_basis(args.M)
    k2max = args.k2max or min(args.M, max(args.n + 1, (args.n**2 + 1) // 2 + 1))
    rep = frequency_gap_check(basis, args.sigma, args.n, k2max, atol=args.atol)
    report = CheckReport("gap-check", not rep.degenerate,
                         {"delta": rep.delta, "closest": str(rep.closest),
                          "differences": rep.n_differences},
                         {"atol": args.atol},
                         {"N": args.n, "sigma": args.sigma, "k2max": k2max, "M": args.M})
    print(report.to_text())
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_prepump(args) -> int:
    basis = build_free_basis(args.M)
    sys_ = diagonalize_sigma(basis, args.sigma)
    psi = WaveFunction.from_modes(args.M, [(args.mode, 1.0)], sys=sys_)
    try:
        res = resonance_prepump(psi, sys_, args.target, amplitude=args.amplitude, dt=args.dt)
    except PrepumpError as exc:
        print(f"[FAIL] prepump: {exc}")
        return EXIT_CHECK
    print(f"[PASS] prepump\n  measured.overlap = {res.overlap!r}\n"
          f"  measured.duration = {res.times.size * args.dt!r}")
    return EXIT_OK


def _sweep_one(path: str, out_root: str | None) -> tuple[str, int]:
    name = os.path.splitext(os.path.basename(path))[0]
    try:
        with open(path) as fh:
            spec = parse_run(fh.read())
        out = os.path.join(out_root, name) if out_root else spec.out
        return path, run(RunManifest(path, spec), out=out)
    except ConfigError as exc:
        print(f"{path}: config error: {exc}", file=sys.stderr)
        return path, EXIT_CONFIG
    except NumericError as exc:
        print(f"{path}: numeric error: {exc}", file=sys.stderr)
        return path, EXIT_NUMERIC


def cmd_sweep(args) -> int:
    with ProcessPoolExecutor(max_workers=args.jobs) as pool:
        results = list(pool.map(_sweep_one, args.configs, [args.out] * len(args.configs)))
    for path, code in results:
        print(f"{path}: exit {code}")
    return max(code for _, code in results)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qwell", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a closed-loop simulation")
    s.add_argument("--config", help="key=value configuration file")
    s.add_argument("--scenario", help="preset: fig1, fig2 or stall")
    s.add_argument("--out", help="output directory")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a key")
    s.add_argument("--checks", help="comma list of checks")
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("verify", help="run a verification check")
    v.add_argument("what", choices=("spectrum", "decrease", "oracle"))
    v.add_argument("--mbig", type=int, default=200, help="truncation for spectrum checks")
    v.add_argument("--scenario", default="fig1", help="preset for the decrease check")
    v.add_argument("--dt", type=float, default=None)
    v.add_argument("--T", type=float, default=None)
    v.add_argument("--sampling", default="midpoint", choices=("hold", "midpoint"))
    v.add_argument("--M", type=int, default=40, help="truncation for the oracle run")
    v.add_argument("--n", type=int, default=1024, help="grid size for the oracle")
    v.set_defaults(func=cmd_verify)

    g = sub.add_parser("gap-check", help="smallest distance between transition frequencies")
    g.add_argument("--n", type=int, required=True, help="cutoff N")
    g.add_argument("--sigma", type=float, default=0.0)
    g.add_argument("--k2max", type=int, default=None)
    g.add_argument("--M", type=int, default=20)
    g.add_argument("--atol", type=float, default=1e-8)
    g.set_defaults(func=cmd_gap_check)

    w = sub.add_parser("sweep", help="run several configuration files concurrently")
    w.add_argument("configs", nargs="+")
    w.add_argument("--jobs", type=int, default=None)
    w.add_argument("--out", help="root directory; each run writes to a subdirectory")
    w.set_defaults(func=cmd_sweep)

    r = sub.add_parser("prepump", help="resonant open-loop transfer into the ground state")
    r.add_argument("--mode", type=int, default=2, help="initially populated mode")
    r.add_argument("--sigma", type=float, default=0.0)
    r.add_argument("--target", type=float, default=0.1)
    r.add_argument("--amplitude", type=float, default=1.0)
    r.add_argument("--dt", type=float, default=1e-3)
    r.add_argument("--M", type=int, default=20)
    r.set_defaults(func=cmd_prepump)
    return p


def _verify_defaults(args):
    if args.command != "verify":
        return
    if args.what == "decrease":
        args.dt = args.dt or 1e-5
        args.T = args.T or 2.0
    elif args.what == "oracle":
        args.dt = args.dt or 1e-4
        args.T = args.T or 1.0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _verify_defaults(args)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (QwellError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
