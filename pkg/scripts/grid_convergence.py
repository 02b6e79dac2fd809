"""Fitted decay rate and final interface error of the reference run versus grid size."""
import argparse
from pathlib import Path

import numpy as np

from extruder_stab.lyapunov import assess_convergence
from extruder_stab.scenario import load_scenario
from extruder_stab.solver import simulate

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenario", default=str(HERE.parent / "scenarios" / "reference.toml"))
    ap.add_argument("--grids", type=int, nargs="+", default=[32, 64, 128, 256, 512])
    args = ap.parse_args()

    print("M,steps,omega,r2,l_rel_error,l_at_t100")
    prev = None
    for M in args.grids:
        sc = load_scenario(args.scenario, {"solver.M": M})
        eq = sc.equilibrium()
        tr = simulate(sc.solver, sc.params, eq, sc.resolved_gains(eq), sc.grid(), sc.l0, sc.profile)
        rep = assess_convergence(tr.times, [s.l for s in tr.states], [r.h2_err for r in tr.readings],
                                 [r.Lcomposite for r in tr.readings], eq.l_e, completed=tr.completed)
        l100 = float(np.interp(100.0, tr.times, [s.l for s in tr.states]))
        print(f"{M},{tr.n_steps},{rep.fit.omega:.6g},{rep.fit.r2:.6f},{rep.l_error:.3g},{l100:.8g}")
        if prev is not None:
            print(f"#   change in omega from previous grid: {rep.fit.omega - prev:+.3g}")
        prev = rep.fit.omega


if __name__ == "__main__":
    main()
