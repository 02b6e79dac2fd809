"""Run the reference closed-loop experiment and print the convergence summary.

    python3 scripts/reproduce_reference.py [--out out/reference] [--M 128]
"""
import argparse
from pathlib import Path

from extruder_stab.cli import run_scenario
from extruder_stab.scenario import load_scenario

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", default=str(HERE.parent / "scenarios" / "reference.toml"))
    ap.add_argument("--out", default="out/reference")
    ap.add_argument("--M", type=int)
    args = ap.parse_args()

    sc = load_scenario(args.scenario, {"solver.M": args.M} if args.M else None)
    res = run_scenario(sc, Path(args.out))
    traj, rep, meta = res["traj"], res["report"], res["meta"]
    eq = meta["equilibrium"]
    print(f"l_e = {eq['l_e']:.6g}  dP_e = {eq['dP_e']:.6g}  a1 = {meta['linearization']['a1']:.4g}")
    print(f"status = {traj.status}  steps = {traj.n_steps}  rejections = {traj.rejections}")
    print(f"l(t_end) = {traj.states[-1].l:.10g}  relative error = {rep.l_error:.3g}")
    print(f"h2 shrink = {rep.h2_shrink:.3g}  omega = {rep.fit.omega:.5g}  r2 = {rep.fit.r2:.5f}")
    print(f"monotonicity violations after transient = {len(rep.violations)}")
    print(f"converged = {rep.converged}")


if __name__ == "__main__":
    main()
