"""Measure the weak bias of the expected energy balance on the linear OU case.

The backward-Euler step loses ``0.5 ||u^{m+1} - u^m - xi^m||^2`` per step,
so the expected residual is ``O(dt)``. This prints ``|residual| / dt`` for a
range of step sizes; the allowance constant in ``muslx.verify`` is set with
a margin above the largest value.

    python scripts/calibrate_bias.py --paths 400 --cells 128
"""
import argparse

import numpy as np

from muslx.grid import Domain, SineBasis
from muslx.noise import diagonal_additive
from muslx.operators import plaplace_flux
from muslx.solver import SolverConfig, solve_ensemble
from muslx.verify import C_BIAS, energy_residual_expectation


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--paths", type=int, default=400)
    ap.add_argument("--cells", type=int, default=128)
    ap.add_argument("--T", type=float, default=0.5)
    ap.add_argument("--sigma", type=float, default=0.5)
    ap.add_argument("--dts", default="0.01,0.005,0.002,0.001")
    args = ap.parse_args()

    d = Domain(1, args.cells)
    B = SineBasis(d)
    worst = 0.0
    print(f"{'dt':>8} {'residual':>12} {'stderr':>10} {'|res|/dt':>10}")
    for dt in (float(v) for v in args.dts.split(",")):
        cfg = SolverConfig(d, plaplace_flux(2), B.mode(1), args.T, dt,
                           diagonal_additive(B, [args.sigma]), paths=args.paths)
        rep = energy_residual_expectation(solve_ensemble(cfg), c_bias=0.0)
        ratio = abs(rep.residual) / dt
        worst = max(worst, ratio)
        print(f"{dt:8.4f} {rep.residual:12.4e} {rep.mc_stderr:10.2e} {ratio:10.3f}")
    print(f"max |residual|/dt = {worst:.3f}; C_BIAS = {C_BIAS} (margin {C_BIAS / worst:.2f}x)")
    return 0 if np.isfinite(worst) else 1


if __name__ == "__main__":
    raise SystemExit(main())
