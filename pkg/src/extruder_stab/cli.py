"""Command-line entry point: ``extruder-stab <subcommand> --scenario FILE``.

Exit codes: 0 on success, 2 on an analysis-level failure (gain conditions
violated, simulation fault, invalid decay fit), 1 on I/O or validation errors.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import linearization as lin
from . import lyapunov as lyap
from .model import ModelError, PhysicalParams
from .scenario import (
    Scenario,
    ScenarioError,
    dataclass_dict,
    load_scenario,
    parse_override,
    read_trajectory_csv,
    write_metadata,
    write_trajectory_csv,
)
from .solver import simulate

logger = logging.getLogger("extruder_stab")

EXIT_OK, EXIT_IO, EXIT_ANALYSIS = 0, 1, 2
STATED_L_E = 1.37


def _scenario(args) -> Scenario:
    overrides = dict(parse_override(s) for s in args.set or [])
    if args.fixed_step:
        overrides["solver.fixed_step"] = True
    return load_scenario(args.scenario, overrides)


def _print_kv(title: str, obj) -> None:
    print(f"[{title}]")
    items = dataclass_dict(obj) if hasattr(obj, "__dataclass_fields__") else dict(obj)
    for k, v in items.items():
        print(f"  {k} = {v:.10g}" if isinstance(v, float) else f"  {k} = {v}")


def cmd_equilibrium(args) -> int:
    sc = _scenario(args)
    eq = sc.equilibrium()
    _print_kv("equilibrium", eq)
    if sc.params == PhysicalParams.reference() and abs(sc.setpoint["f_pe"] - 0.6) < 1e-12:
        print(f"  note: reference setup states l_e = {STATED_L_E}; the stationarity condition gives {eq.l_e:.6g}")
    return EXIT_OK


def cmd_linearize(args) -> int:
    sc = _scenario(args)
    eq = sc.equilibrium()
    lc = lin.linearize(sc.params, eq)
    fd = lin.linearize_fd(sc.params, eq)
    _print_kv("linearization", lc)
    worst = max(abs(getattr(lc, k) - getattr(fd, k)) / max(abs(getattr(lc, k)), 1e-300)
                for k in ("a1", "a3", "b1", "b2"))
    print(f"  fd_max_rel_error = {worst:.3g}")
    ok, case = lin.gains_exist(lc)
    print(f"  gains_exist = {ok} ({case})")
    return EXIT_OK if ok else EXIT_ANALYSIS


def cmd_check_gains(args) -> int:
    sc = _scenario(args)
    eq = sc.equilibrium()
    g = sc.resolved_gains(eq)
    lc = lin.linearize(sc.params, eq)
    chk = lin.check_gain_conditions(lc, eq, sc.params, g)
    _print_kv("gains", g)
    _print_kv("conditions", chk)
    rep = lin.check_compatibility(sc.params, eq, g, sc.l0, sc.profile, _profile_slope(sc.profile))
    _print_kv("compatibility", {k: getattr(rep, k) for k in ("c1_residual", "c2_residual", "c2_residual_alt")})
    return EXIT_OK if chk.passes else EXIT_ANALYSIS


def cmd_synthesize(args) -> int:
    sc = _scenario(args)
    eq = sc.equilibrium()
    lc = lin.linearize(sc.params, eq)
    try:
        g = lin.synthesize_gains(lc, eq, sc.params, args.strategy)
    except lin.GainSynthesisError as exc:
        print(f"synthesis failed: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    _print_kv("gains", g)
    _print_kv("conditions", lin.check_gain_conditions(lc, eq, sc.params, g))
    return EXIT_OK


def _profile_slope(profile):
    deriv = getattr(profile, "derivative", None)
    return float(deriv(0.0)) if deriv else None


def run_scenario(sc: Scenario, out_dir: Path, strict_compat: bool = False, stem: str = "trajectory") -> dict:
    """Simulate ``sc`` and write ``<stem>.csv`` and ``<stem>.meta`` into ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    p, eq, grid = sc.params, sc.equilibrium(), sc.grid()
    g = sc.resolved_gains(eq)
    lc = lin.linearize(p, eq)
    traj = simulate(sc.solver, p, eq, g, grid, sc.l0, sc.profile, lyapunov=sc.lyapunov, strict_compat=strict_compat)
    write_trajectory_csv(out_dir / f"{stem}.csv", traj, p, grid, sc.outputs.probes)

    report = lyap.assess_convergence(
        traj.times,
        [s.l for s in traj.states],
        [r.h2_err for r in traj.readings],
        [r.Lcomposite for r in traj.readings],
        eq.l_e,
        completed=traj.completed,
    )
    chk = lin.check_gain_conditions(lc, eq, p, g)
    th = lin.theta_constants(lc, eq, p, g)
    lcfg = traj.lyapunov
    meta = {
        "run": {
            "scenario_hash": sc.content_hash(),
            "status": traj.status,
            "reason": traj.reason,
            "fault_time": traj.fault_time if traj.fault_time is not None else float("nan"),
            "steps": traj.n_steps,
            "rejections": traj.rejections,
            "outflow_flags": traj.outflow_flags,
            "converged": "yes" if report.converged else "no",
        },
        "scenario": sc.raw,
        "equilibrium": dataclass_dict(eq),
        "gains": dataclass_dict(g),
        "linearization": dataclass_dict(lc),
        "theta": dataclass_dict(th),
        "conditions": {"passes": "yes" if chk.passes else "no", "margin_k1": chk.margin_k1, "margin_k2": chk.margin_k2},
        "compatibility": {
            "c1_residual": traj.compatibility.c1_residual,
            "c2_residual": traj.compatibility.c2_residual,
            "c2_residual_alt": traj.compatibility.c2_residual_alt,
        },
        "lyapunov": dataclass_dict(lcfg),
        "solver": dataclass_dict(sc.solver),
        "fit": {
            "omega": report.fit.omega,
            "Mconst": report.fit.Mconst,
            "r2": report.fit.r2,
            "t_start": report.fit.window[0],
            "t_end": report.fit.window[1],
            "l_rel_error": report.l_error,
            "h2_shrink": report.h2_shrink,
            "monotonicity_violations": len(report.violations),
        },
    }
    write_metadata(out_dir / f"{stem}.meta", meta)
    return {"traj": traj, "report": report, "meta": meta}


def cmd_simulate(args) -> int:
    sc = _scenario(args)
    out = Path(args.out or sc.outputs.directory)
    res = run_scenario(sc, out, strict_compat=args.strict_compat)
    rep = res["report"]
    print(f"status = {res['traj'].status} {res['traj'].reason}".rstrip())
    print(f"omega = {rep.fit.omega:.6g}  r2 = {rep.fit.r2:.6f}  l_rel_error = {rep.l_error:.3g}  "
          f"h2_shrink = {rep.h2_shrink:.3g}  monotonicity_violations = {len(rep.violations)}")
    print(f"converged = {rep.converged}")
    print(f"wrote {out / 'trajectory.csv'} and {out / 'trajectory.meta'}")
    return EXIT_OK if res["traj"].completed else EXIT_ANALYSIS


def cmd_decay_fit(args) -> int:
    data = read_trajectory_csv(args.csv)
    t, L = data["t"], data[args.column]
    if args.noise:
        rng = np.random.default_rng(args.seed)
        L = L * (1 + args.noise * rng.standard_normal(L.size))
    fit = lyap.fit_decay(t, L, args.skip)
    start = int(np.searchsorted(t, t[0] + args.skip * (t[-1] - t[0])))
    viol = lyap.monotonicity_report(L[start:], args.tolerance) if L.size - start >= 2 else []
    _print_kv("decay_fit", fit)
    print(f"  valid = {fit.valid}")
    print(f"  monotonicity_violations = {len(viol)}")
    return EXIT_OK if fit.valid and fit.omega > 0 else EXIT_ANALYSIS


def _sweep_job(job):
    doc_overrides, scenario, out_dir, stem = job
    sc = load_scenario(scenario, doc_overrides)
    res = run_scenario(sc, Path(out_dir), stem=stem)
    rep = res["report"]
    return stem, res["traj"].status, rep.fit.omega, rep.fit.r2, rep.l_error, rep.converged


def cmd_sweep(args) -> int:
    base = dict(parse_override(s) for s in args.set or [])
    if args.fixed_step:
        base["solver.fixed_step"] = True
    jobs = []
    out = Path(args.out or "sweep")
    if args.grid:
        for M in args.grid:
            jobs.append(({**base, "solver.M": M}, args.scenario, str(out), f"M{M}"))
    if args.gains:
        for i, pair in enumerate(args.gains):
            k1, k2 = (float(v) for v in pair.split(","))
            jobs.append(({**base, "gains.k1": k1, "gains.k2": k2}, args.scenario, str(out), f"gains{i}"))
    if not jobs:
        print("sweep needs --grid and/or --gains", file=sys.stderr)
        return EXIT_IO
    workers = int(os.environ.get("EXTRUDER_STAB_THREADS", os.cpu_count() or 1))
    with ProcessPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(_sweep_job, jobs))
    print("run,status,omega,r2,l_rel_error,converged")
    for stem, status, omega, r2, lerr, conv in results:
        print(f"{stem},{status},{omega:.6g},{r2:.6f},{lerr:.3g},{conv}")
    return EXIT_OK if all(r[1] == "completed" for r in results) else EXIT_ANALYSIS


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", default="builtin:paper-sec4", help="scenario/metadata file or builtin:<preset>")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a scenario value")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, default=0, help="RNG seed (noise injection only)")
    common.add_argument("--fixed-step", action="store_true", help="classical RK4 with dt = solver.dt_init")
    common.add_argument("--strict-compat", action="store_true", help="abort when compatibility residuals exceed tolerance")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="extruder-stab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("equilibrium", parents=[common]).set_defaults(func=cmd_equilibrium)
    sub.add_parser("linearize", parents=[common]).set_defaults(func=cmd_linearize)
    sub.add_parser("check-gains", parents=[common]).set_defaults(func=cmd_check_gains)
    p = sub.add_parser("synthesize-gains", parents=[common])
    p.add_argument("--strategy", choices=("paper-limit", "margin-max"), default="paper-limit")
    p.set_defaults(func=cmd_synthesize)
    sub.add_parser("simulate", parents=[common]).set_defaults(func=cmd_simulate)
    p = sub.add_parser("decay-fit", parents=[common])
    p.add_argument("csv", help="trajectory CSV written by simulate")
    p.add_argument("--column", default="Lcomposite")
    p.add_argument("--skip", type=float, default=0.1, help="leading fraction of the run to ignore")
    p.add_argument("--tolerance", type=float, default=1e-8, help="relative monotonicity tolerance")
    p.add_argument("--noise", type=float, default=0.0, help="multiplicative noise level (robustness check)")
    p.set_defaults(func=cmd_decay_fit)
    p = sub.add_parser("sweep", parents=[common])
    p.add_argument("--grid", type=int, nargs="+", help="cell counts M to run")
    p.add_argument("--gains", nargs="+", metavar="K1,K2", help="gain pairs to run")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ScenarioError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ModelError, lin.GainSynthesisError) as exc:
        print(f"analysis error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS


if __name__ == "__main__":
    sys.exit(main())
