"""Largest perturbation amplitude of a given shape that still converges (bisection).

The initial state is l0 = l_e + amp * dl and f0 = f_pe + amp * shape(x), with the
inflow boundary value kept consistent. This is an observation, not a guarantee.
"""
import argparse
import logging
import warnings
from pathlib import Path

import numpy as np

from extruder_stab.lyapunov import LyapunovConfig, assess_convergence, estimate_basin
from extruder_stab.model import ModelError
from extruder_stab.scenario import load_scenario
from extruder_stab.solver import TabulatedProfile, simulate

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", default=str(HERE.parent / "scenarios" / "reference.toml"))
    ap.add_argument("--dl", type=float, default=1.0, help="interface offset per unit amplitude")
    ap.add_argument("--df", type=float, default=1.0, help="fill bump height per unit amplitude")
    ap.add_argument("--hi", type=float, default=0.5)
    ap.add_argument("--iters", type=int, default=10)
    ap.add_argument("--M", type=int, default=64)
    args = ap.parse_args()
    logging.getLogger("extruder_stab").setLevel(logging.ERROR)

    sc = load_scenario(args.scenario, {"solver.M": args.M})
    p, eq = sc.params, sc.equilibrium()
    g = sc.resolved_gains(eq)
    xs = np.linspace(0.0, 1.0, 65)

    def converges(amp):
        l0 = eq.l_e + amp * args.dl
        if not 0 < l0 < p.L:
            return False
        prof = TabulatedProfile(tuple(xs), tuple(eq.f_pe + amp * args.df * np.sin(np.pi * xs) ** 2))
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                tr = simulate(sc.solver, p, eq, g, sc.grid(), l0, prof, lyapunov=LyapunovConfig(1, 1, 1, 1, 1, 1))
        except ModelError as exc:
            # the loop cannot be actuated from this start
            print(f"  amp={amp:.5g} rejected: {exc}")
            return False
        rep = assess_convergence(tr.times, [s.l for s in tr.states], [r.h2_err for r in tr.readings],
                                 [r.Lcomposite for r in tr.readings], eq.l_e, completed=tr.completed)
        ok = tr.completed and rep.l_error < 0.01 and rep.h2_shrink >= 100
        print(f"  amp={amp:.5g} status={tr.status} converged={ok}")
        return ok

    amp = estimate_basin(converges, 1e-3, args.hi, args.iters)
    print(f"largest converging amplitude = {amp:.5g} (searched up to {args.hi})")


if __name__ == "__main__":
    main()
