"""Tabulate gain-condition margins over a (k1, k2) grid and simulate a few of them.

The analytic check is cheap and covers the whole grid; ``--simulate N`` picks N
evenly spaced grid points and reports whether the closed loop converged.
"""
import argparse
import logging
import warnings
from pathlib import Path

import numpy as np

from extruder_stab.linearization import LoopDegeneracyError, check_gain_conditions, linearize
from extruder_stab.lyapunov import LyapunovConfig, assess_convergence
from extruder_stab.model import Gains
from extruder_stab.scenario import load_scenario
from extruder_stab.solver import simulate

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", default=str(HERE.parent / "scenarios" / "reference.toml"))
    ap.add_argument("--k1", type=float, nargs="+", default=list(np.logspace(-4, 0, 5)))
    ap.add_argument("--k2", type=float, nargs="+", default=[0.0, 1e-5, 1e-4, 1e-3])
    ap.add_argument("--simulate", type=int, default=4)
    args = ap.parse_args()
    logging.getLogger("extruder_stab").setLevel(logging.ERROR)

    sc = load_scenario(args.scenario)
    p, eq = sc.params, sc.equilibrium()
    lc = linearize(p, eq)
    rows = []
    print("k1,k2,passes,theta0,margin_k1,margin_k2")
    for k1 in args.k1:
        for k2 in args.k2:
            g = Gains(k1, k2)
            try:
                chk = check_gain_conditions(lc, eq, p, g)
            except LoopDegeneracyError:
                print(f"{k1:g},{k2:g},degenerate,,,")
                continue
            rows.append(g)
            print(f"{k1:g},{k2:g},{chk.passes},{chk.theta0:.4g},{chk.margin_k1:.4g},{chk.margin_k2:.4g}")

    if not args.simulate:
        return
    print("\nk1,k2,status,converged,omega")
    picks = np.unique(np.linspace(0, len(rows) - 1, args.simulate).round().astype(int))
    for i in picks:
        g = rows[i]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            tr = simulate(sc.solver, p, eq, g, sc.grid(), sc.l0, sc.profile, lyapunov=LyapunovConfig(1, 1, 1, 1, 1, 1))
        rep = assess_convergence(tr.times, [s.l for s in tr.states], [r.h2_err for r in tr.readings],
                                 [r.Lcomposite for r in tr.readings], eq.l_e, completed=tr.completed)
        print(f"{g.k1:g},{g.k2:g},{tr.status},{rep.converged},{rep.fit.omega:.4g}")


if __name__ == "__main__":
    main()
